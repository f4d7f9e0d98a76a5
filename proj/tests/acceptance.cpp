#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "support.hpp"
#include "udissect/blas.hpp"
#include "udissect/checkpoint.hpp"
#include "udissect/gradcheck.hpp"
#include "udissect/losses.hpp"
#include "udissect/pipeline.hpp"

using namespace udissect;
using namespace udissect::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

struct Outcome {
  int id;
  bool exact;
  bool pass;
  std::string title;
  std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, bool exact, bool pass, const std::string& title, const std::string& detail) {
  outcomes.push_back({id, exact, pass, title, detail});
  std::printf("criterion %2d: %s  %s  [%s]\n", id, pass ? "PASS" : "FAIL", title.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Tensor<float> select_rows(const Tensor<float>& m, const std::vector<std::size_t>& rows) {
  const std::size_t v = m.shape()[1];
  Tensor<float> out({rows.size(), v});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < v; ++j) out.at(i, j) = m.at(rows[i], j);
  }
  return out;
}

// ---- 1, 2: losses --------------------------------------------------------------

void criterion_gradients() {
  const auto start = Clock::now();
  double worst = 0;
  std::size_t checked = 0;
  std::string worst_at;
  for (int batch = 0; batch < 20; ++batch) {
    ModelConfig c = tiny_config(batch % 2 == 0 ? MlpStyle::TwoMatrix : MlpStyle::Gated, 100 + batch);
    Weights<double> model = tiny_weights<double>(c);
    ModelConfig rc = c;
    rc.seed = 500 + batch;
    Weights<double> ref = tiny_weights<double>(rc, 0.9);
    require_grad_all(model);
    std::mt19937_64 rng(1000 + batch);
    const auto forget = random_batch(rng, c, 2), retain = random_batch(rng, c, 2);
    std::vector<PreferenceExample> prefs;
    for (int i = 0; i < 2; ++i) {
      auto s = random_batch(rng, c, 3, 1, 3);
      prefs.push_back({s[0], s[1], s[2]});
    }
    for (int which = 0; which < 5; ++which) {
      Graph<double> g;
      Var root;
      switch (which) {
        case 0: root = loss_ga(g, model, forget); break;
        case 1: root = loss_grad_diff(g, model, ref, forget, retain, 0.7); break;
        case 2: root = loss_dpo(g, model, ref, prefs, 0.5); break;
        case 3: root = loss_npo(g, model, ref, prefs, 0.5); break;
        default: root = loss_npo_kl(g, model, ref, prefs, retain, 0.5, 0.7); break;
      }
      for_each_param(model, [&](const std::string& name, Tensor<double>& t, ParamGroup) {
        const auto report = gradient_check(g, root, t, 1e-5);
        checked += t.size();
        if (report.max_deviation > worst) {
          worst = report.max_deviation;
          worst_at = "batch " + std::to_string(batch) + " loss " + std::to_string(which) + " " + name;
        }
      });
    }
  }
  const double seconds = since(start);
  record(1, true, worst <= 1e-4 && seconds < 60.0,
         "finite-difference gradients of GA, GradDiff, DPO, NPO, NPO+KL on 20 batches",
         "max deviation " + sci(worst) + " at " + worst_at + ", " + std::to_string(checked) + " entries, " +
             num(seconds, 1) + " s");
}

void criterion_anchors(const Checkpoint& vanilla, const World& world) {
  double dpo_err = 0, npo_err = 0;
  auto check = [&](const Checkpoint& w, const std::vector<PreferenceExample>& batch) {
    for (float beta : {0.1f, 0.5f, 2.0f}) {
      Graph<float> g;
      dpo_err = std::max(dpo_err, std::abs(double(g.value(loss_dpo(g, w, w, batch, beta))[0]) - std::log(2.0)));
      Graph<float> g2;
      npo_err = std::max(npo_err, std::abs(double(g2.value(loss_npo(g2, w, w, batch, beta))[0]) -
                                           2.0 / double(beta) * std::log(2.0)));
    }
  };
  std::mt19937_64 rng(7);
  const ModelConfig c = tiny_config();
  const Checkpoint tiny = tiny_weights<float>(c);
  for (int i = 0; i < 5; ++i) {
    std::vector<PreferenceExample> batch;
    for (int k = 0; k < 4; ++k) {
      auto s = random_batch(rng, c, 3, 1, 4);
      batch.push_back({s[0], s[1], s[2]});
    }
    check(tiny, batch);
  }
  const auto split = split_forget_retain(world, {"concept_00"});
  auto prefs = preference_examples(split.forget, world.refusals, 1);
  prefs.resize(std::min<std::size_t>(prefs.size(), 16));
  check(vanilla, prefs);
  // NPO carries a 2/beta factor, so its float error is measured relative to that scale
  const double npo_scaled = npo_err / (2.0 / 0.1);
  record(2, true, dpo_err <= 1e-6 && npo_scaled <= 1e-6, "DPO = ln 2 and NPO = (2/beta) ln 2 when policy equals reference",
         "DPO max |error| " + sci(dpo_err) + ", NPO max |error| " + sci(npo_err) + " (" + sci(npo_scaled) +
             " relative at beta 0.1)");
}

// ---- 3, 4, 6: traces and patching ------------------------------------------------

void criterion_residual(const std::vector<const Checkpoint*>& models, const ProbeSet& probes) {
  double worst = 0, worst_mlp = 0;
  std::size_t traces = 0;
  for (const Checkpoint* w : models) {
    for (const auto& cp : probes.concepts) {
      const auto out = forward_batch(*w, cp.sequences(), static_cast<const HookSet<float>*>(nullptr), true);
      ++traces;
      for (std::size_t l = 0; l < out.layers.size(); ++l) {
        const auto& a = out.layers[l];
        const Tensor<float>& next = l + 1 < out.layers.size() ? out.layers[l + 1].hidden : out.final_hidden;
        for (std::size_t i = 0; i < next.size(); ++i) {
          worst = std::max(worst, double(std::abs(next[i] - (a.hidden[i] + a.attn_out[i] + a.mlp_out[i]))));
        }
        const auto& wv = w->layers[l].mlp_value;
        const std::size_t rows = a.coefficients.shape()[0], n = wv.shape()[0], d = wv.shape()[1];
        for (std::size_t r = 0; r < rows; r += 7) {
          for (std::size_t j = 0; j < d; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < n; ++k) acc += double(a.coefficients.at(r, k)) * double(wv.at(k, j));
            worst_mlp = std::max(worst_mlp, std::abs(acc - double(a.mlp_out.at(r, j))));
          }
        }
      }
    }
  }
  record(3, true, worst <= 1e-5 && worst_mlp <= 1e-5, "residual identity X(l+1) = X(l) + A(l) + M(l) at every layer",
         std::to_string(traces) + " traces, max |error| " + sci(worst) + "; M = m W_V max |error| " + sci(worst_mlp));
}

void criterion_identity_patch(const std::vector<const Checkpoint*>& models, const ProbeSet& probes,
                              std::size_t window) {
  double worst = 0;
  std::size_t runs = 0;
  for (const Checkpoint* w : models) {
    for (const auto& cp : probes.concepts) {
      const auto seqs = cp.sequences();
      const auto trace = record_trace(*w, seqs);
      for (auto e : kAllPatchElements) {
        for (auto m : kAllPatchModes) {
          if (!PatchSpec::valid_combination(e, m)) continue;
          for (std::size_t s = 0; s + window <= w->config.num_layers; ++s) {
            const auto logits = patched_forward(*w, *w, trace, trace, PatchSpec{e, s, window, m}, seqs);
            worst = std::max(worst, double(max_abs_diff(logits, trace.logits)));
            ++runs;
          }
        }
      }
    }
  }
  record(4, true, worst <= 1e-6, "patching a model with its own trace leaves every logit unchanged",
         std::to_string(runs) + " patched passes, max |change| " + sci(worst));
}

void criterion_krs_arithmetic() {
  bool ok = krs(2.0, 0.4) == 0.8;
  for (double x : {1e-9, 0.37, 2.0, 123.5}) ok = ok && krs(x, x) == 0.0 && krs(x, 0.0) == 1.0;
  bool raised = false;
  try {
    krs(9.9e-10, 0.0);
  } catch (const Error& e) {
    raised = e.kind() == ErrorKind::DegenerateBaseline;
  }
  record(5, true, ok && raised, "KRS arithmetic and degenerate baseline",
         "krs(2, 0.4) = " + format_double(krs(2.0, 0.4)) + ", exact 0 and 1 endpoints " + (ok ? "hold" : "violated") +
             ", DegenerateBaseline below 1e-9 " + (raised ? "raised" : "not raised"));
}

void criterion_freeze_closure(const Checkpoint& vanilla, const World& world, const ExperimentConfig& cfg,
                              const ProbeSet& probes) {
  UnlearnConfig uc;
  uc.method = UnlearnMethod::NPO;
  uc.learning_rate = 1e-2;
  uc.epochs = 3;
  uc.freeze_mask = {ParamGroup::Embeddings, ParamGroup::Norms};
  const auto split = split_forget_retain(world, cfg.forget_ids);
  UnlearnHooks hooks;
  hooks.eval_limit = 8;
  const auto run = run_unlearning(vanilla, uc, split.forget, split.retain, world.refusals, hooks);
  const Checkpoint& unlearned = run.snapshots.back().weights;
  Checkpoint swapped = unlearned;
  for (std::size_t l = 0; l < vanilla.config.num_layers; ++l) swapped = swap_value_vectors(swapped, vanilla, l);
  const PatchSpec full{PatchElement::CoeffPlusAttn, 0, vanilla.config.num_layers, PatchMode::Normal};
  double loss_star = 0, loss_star_o = 0, worst = 1;
  for (const auto& cp : probes.concepts) {
    const auto seqs = cp.sequences();
    const auto rows = cp.scored_rows();
    const auto tv = record_trace(vanilla, seqs);
    const auto tu = record_trace(swapped, seqs, TraceSource::Unlearned);
    const auto unl = forward_batch(unlearned, seqs).logits;
    const auto patched = patched_forward(swapped, vanilla, tv, tu, full, seqs);
    const double ls = mse_logit_loss(select_rows(tv.logits, rows), select_rows(unl, rows));
    const double lo = mse_logit_loss(select_rows(tv.logits, rows), select_rows(patched, rows));
    worst = std::min(worst, krs(ls, lo));
    loss_star += ls;
    loss_star_o += lo;
  }
  const double score = krs(loss_star, loss_star_o);
  record(6, true, worst >= 0.999,
         "freeze embeddings and norms, restore coefficients and attention everywhere and swap all W_V",
         "KRS " + num(score, 6) + " (lowest concept " + num(worst, 6) + "), loss* " + sci(loss_star) + ", loss*o " +
             sci(loss_star_o));
}

// ---- 7: persistence and determinism ----------------------------------------------

bool same_params(const Checkpoint& a, const Checkpoint& b) {
  std::vector<const Tensor<float>*> pa, pb;
  for_each_param(a, [&](const std::string&, const Tensor<float>& t, ParamGroup) { pa.push_back(&t); });
  for_each_param(b, [&](const std::string&, const Tensor<float>& t, ParamGroup) { pb.push_back(&t); });
  if (pa.size() != pb.size() || !(a.config == b.config)) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->shape() != pb[i]->shape()) return false;
    if (std::memcmp(pa[i]->data().data(), pb[i]->data().data(), pa[i]->size() * sizeof(float)) != 0) return false;
  }
  return true;
}

std::vector<std::string> compare_trees(const fs::path& a, const fs::path& b) {
  std::vector<std::string> diffs;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a);
    if (rel.begin()->string() == "manifests") continue;
    if (slurp(entry.path()) != slurp(b / rel)) diffs.push_back(rel.string());
  }
  return diffs;
}

void criterion_determinism(Pipeline& main, const Checkpoint& vanilla, const World& world, const fs::path& scratch) {
  std::vector<std::string> problems;
  const fs::path ck = scratch / "roundtrip.ckpt";
  save_checkpoint(vanilla, ck, "roundtrip");
  const auto back = load_checkpoint_with_provenance(ck);
  if (!same_params(vanilla, back.weights) || back.provenance != "roundtrip") problems.push_back("checkpoint round trip");
  if (encode_checkpoint(back.weights, "roundtrip") != encode_checkpoint(vanilla, "roundtrip")) {
    problems.push_back("re-encoding");
  }

  // a complete small pipeline twice, every artifact byte for byte
  ExperimentConfig small = parse_config(R"(seed = 5
[world]
num_concepts = 4
paragraphs_per_concept = 30
unrelated_qa_per_concept = 8
[model]
num_layers = 8
hidden_dim = 16
mlp_dim = 32
num_heads = 2
max_seq_len = 128
[pretrain]
steps = 80
learning_rate = 1e-2
batch_size = 8
[unlearn]
epochs = 3
[[unlearn.runs]]
method = "GradDiff"
learning_rate = 1e-2
[[unlearn.runs]]
method = "NPO"
learning_rate = 1e-2
[probe]
continuation_length = 8
questions_per_concept = 4
)");
  std::size_t files = 0;
  for (const char* name : {"small_a", "small_b"}) {
    small.output_dir = scratch / name;
    fs::remove_all(small.output_dir);
    StageOptions o;
    o.log = [](const std::string&) {};
    Pipeline p(small, o);
    for (Stage s : {Stage::World, Stage::Pretrain, Stage::Unlearn, Stage::Scan, Stage::Behavior, Stage::Report}) p.run(s);
  }
  const auto diffs = compare_trees(scratch / "small_a", scratch / "small_b");
  for (const auto& entry : fs::recursive_directory_iterator(scratch / "small_a")) files += entry.is_regular_file();
  for (const auto& d : diffs) problems.push_back("small pipeline " + d);

  // the reference run: regenerate the world and the scans, and retrain the
  // NPO run from the stored vanilla model
  const auto& cfg = main.config();
  const auto world_bytes = slurp(main.paths().world_json());
  const std::vector<std::string> scan_files = [&] {
    std::vector<std::string> v;
    for (const auto& run : cfg.unlearn) v.push_back(slurp(main.paths().scan_json(run.name)));
    return v;
  }();
  main.gen_world();
  if (slurp(main.paths().world_json()) != world_bytes) problems.push_back("reference world");
  main.scan();
  for (std::size_t i = 0; i < cfg.unlearn.size(); ++i) {
    if (slurp(main.paths().scan_json(cfg.unlearn[i].name)) != scan_files[i]) problems.push_back("reference scan");
  }
  const auto split = split_forget_retain(world, cfg.forget_ids);
  const UnlearnRun* npo = nullptr;
  for (const auto& run : cfg.unlearn) {
    if (run.config.method == UnlearnMethod::NPO) npo = &run;
  }
  if (npo != nullptr) {
    UnlearnHooks hooks;
    hooks.keep_snapshots = false;
    bool equal = true;
    hooks.on_epoch = [&](const EpochSnapshot& s) {
      equal = equal && same_params(s.weights, main.load_unlearned(*npo, s.epoch));
    };
    run_unlearning(vanilla, npo->config, split.forget, split.retain, world.refusals, hooks);
    if (!equal) problems.push_back("reference NPO checkpoints");
  }
  std::string detail = "checkpoint round trip bit-exact, " + std::to_string(files) +
                       " artifacts of a full small pipeline identical across two runs, reference world, scans and " +
                       "NPO checkpoints reproduced";
  if (!problems.empty()) {
    detail = "mismatch:";
    for (const auto& p : problems) detail += " " + p + ";";
  }
  record(7, true, problems.empty(), "checkpoint round trip and pipeline determinism", detail);
}

// ---- 8-12: directional ---------------------------------------------------------------

std::string row_text(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + num(x);
  return s;
}

void directional(const Pipeline& p) {
  const auto& cfg = p.config();
  const auto rows = p.load_behavior();
  bool c8 = true, c9 = true, c10 = true, c11 = true, c12 = true;
  std::string d8, d9, d10, d11, d12;
  auto sep = [](std::string& s) {
    if (!s.empty()) s += "; ";
  };
  for (const auto& run : cfg.unlearn) {
    const KrsScan scan = p.load_scan(run);
    const auto vv = scan.row(PatchElement::ValueVectors, PatchMode::Normal);
    const auto co = scan.row(PatchElement::Coefficients, PatchMode::Normal);
    const auto at = scan.row(PatchElement::AttentionOut, PatchMode::Normal);
    const auto cpa = scan.row(PatchElement::CoeffPlusAttn, PatchMode::Normal);
    const auto co_iso = scan.row(PatchElement::Coefficients, PatchMode::Isolated);
    const auto at_iso = scan.row(PatchElement::AttentionOut, PatchMode::Isolated);

    const double vv_max = *std::max_element(vv.begin(), vv.end());
    c8 = c8 && vv_max < 0.05;
    sep(d8);
    d8 += run.name + " value_vectors " + row_text(vv);

    const double gain = co.back() - co.front();
    c9 = c9 && gain >= 0.3 && co.back() >= 0.5;
    sep(d9);
    d9 += run.name + " coefficients " + row_text(co) + ", last minus first " + num(gain);

    const double single = std::max({*std::max_element(co.begin(), co.end()), *std::max_element(at.begin(), at.end()),
                                    vv_max});
    const double peak = *std::max_element(cpa.begin(), cpa.end());
    c10 = c10 && peak >= single - 0.02;
    sep(d10);
    d10 += run.name + " coeff_plus_attn peak " + num(peak) + " vs single-element peak " + num(single);

    bool dominated = true;
    for (std::size_t w = 0; w < co_iso.size(); ++w) dominated = dominated && co_iso[w] > at_iso[w];
    c11 = c11 && dominated;
    sep(d11);
    d11 += run.name + " isolated coefficients " + row_text(co_iso) + " vs attention " + row_text(at_iso);

    const auto curve = behavior_curve(rows, run.name);
    const double rho = spearman(curve.target, curve.unrelated);
    c12 = c12 && rho > 0;
    sep(d12);
    d12 += run.name + " rho " + num(rho) + " (target BLEU " + num(curve.target.front()) + " -> " +
           num(curve.target.back()) + ", unrelated " + num(curve.unrelated.front()) + " -> " +
           num(curve.unrelated.back()) + ")";
  }
  record(8, false, c8, "value-vector restoration stays below 0.05 at every window", d8);
  record(9, false, c9, "coefficient restoration: last window >= first + 0.3 and >= 0.5", d9);
  record(10, false, c10, "coeff_plus_attn peak >= largest single-element peak - 0.02", d10);
  record(11, false, c11, "isolated coefficients exceed isolated attention at every window", d11);
  record(12, false, c12, "positive Spearman correlation of target and unrelated BLEU across epochs", d12);
}

}  // namespace

int main(int argc, char** argv) {
  blas::use_single_thread();
  CLI::App app{"Acceptance checks"};
  std::string out = "acceptance_run";
  bool resume = false;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--out", out, "directory for the reference pipeline run");
  app.add_flag("--resume", resume, "reuse current artifacts of a previous run");
  app.add_option("--workers", workers, "worker threads for scan and behavior");
  CLI11_PARSE(app, argc, argv);

  try {
    criterion_gradients();
    criterion_krs_arithmetic();

    ExperimentConfig cfg;
    cfg.output_dir = out;
    cfg.workers = workers;
    StageOptions options;
    options.resume = resume;
    options.log = [](const std::string& s) {
      std::printf("  %s\n", s.c_str());
      std::fflush(stdout);
    };
    Pipeline pipeline(cfg, options);
    const auto start = Clock::now();
    std::string stage_times;
    for (Stage s : {Stage::World, Stage::Pretrain, Stage::Unlearn, Stage::Scan, Stage::Behavior, Stage::Report}) {
      const auto t = Clock::now();
      pipeline.run(s);
      stage_times += (stage_times.empty() ? "" : ", ") + to_string(s) + " " + num(since(t), 0) + " s";
    }
    const double total = since(start);
    std::printf("reference pipeline: %.0f s on %u hardware threads (%s)\n", total,
                std::thread::hardware_concurrency(), stage_times.c_str());

    const World world = pipeline.load_world();
    const Checkpoint vanilla = pipeline.load_vanilla();
    const ProbeSet probes = probes_from_json(read_json_file(pipeline.paths().probes()));
    std::vector<Checkpoint> finals;
    for (const auto& run : cfg.unlearn) finals.push_back(pipeline.load_unlearned(run, run.config.epochs));
    std::vector<const Checkpoint*> models{&vanilla};
    for (const auto& f : finals) models.push_back(&f);

    criterion_anchors(vanilla, world);
    criterion_residual(models, probes);
    criterion_identity_patch(models, probes, cfg.scan.window_size);
    criterion_freeze_closure(vanilla, world, cfg, probes);
    const fs::path scratch = fs::path(out) / "determinism";
    fs::create_directories(scratch);
    criterion_determinism(pipeline, vanilla, world, scratch);
    directional(pipeline);
    std::printf("pipeline runtime %.0f s (budget 1800 s)\n", total);
  } catch (const Error& e) {
    std::printf("aborted: %s\n", e.what());
    return 1;
  }

  std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  std::size_t exact_failed = 0, passed = 0;
  std::printf("\nsummary\n");
  for (const auto& o : outcomes) {
    std::printf("criterion %2d: %s  %s\n", o.id, o.pass ? "PASS" : "FAIL", o.title.c_str());
    passed += o.pass;
    exact_failed += o.exact && !o.pass;
  }
  std::printf("%zu of %zu criteria pass; exact criteria 1-7 %s. Directional criteria 8-12 are reported, "
              "the exit status reflects criteria 1-7 only.\n",
              passed, outcomes.size(), exact_failed == 0 ? "all pass" : "have failures");
  return exact_failed == 0 ? 0 : 1;
}
