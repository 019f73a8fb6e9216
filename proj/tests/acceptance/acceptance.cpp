// Acceptance suite: one PASS/FAIL line per criterion.
//
//   gemlab_acceptance                 run every criterion
//   gemlab_acceptance --criterion N   run one criterion

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gemlab/errors.hpp"
#include "gemlab/gradcheck.hpp"
#include "gemlab/model.hpp"
#include "gemlab/profile.hpp"
#include "gemlab/scene.hpp"
#include "gemlab/sweep.hpp"
#include "gemlab/training.hpp"
#include "support.hpp"

using namespace gemlab;
using gemlab::testing::dense_masked_attention;
using gemlab::testing::max_abs_diff;
using gemlab::testing::random_cloud;
using gemlab::testing::random_values;
using gemlab::testing::tiny_config;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

PeftConfig peft(Method m, std::size_t rank = 4, std::size_t tokens = 2, Sharing s = Sharing::Global) {
  PeftConfig c;
  c.method = m;
  c.rank = rank;
  c.tokens = tokens;
  c.sharing = s;
  return c;
}

void perturb(ParamStore& store, const std::string& prefix, std::uint64_t seed, double amp = 0.3) {
  for (const auto& n : store.names(prefix)) {
    auto v = store.get(n).mutable_data();
    auto noise = random_values(v.size(), ++seed, -amp, amp);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += noise[i];
  }
}

BackboneConfig desk_config() {
  BackboneConfig c;
  c.width = 32;
  c.blocks = 4;
  c.stage_blocks = {2, 2};
  return c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------

Verdict parameter_count_formula() {
  std::ostringstream detail;
  bool ok = true;
  for (auto [d, r] : {std::pair<std::size_t, std::size_t>{64, 8}, {32, 4}, {64, 16}}) {
    BackboneConfig b;
    b.width = d;
    b.heads = 4;
    std::size_t enumerated = 0;
    for (const auto& spec : peft_layout(b, peft(Method::GemSaOnly, r, 1)))
      if (spec.name.find(".sa.") != std::string::npos) enumerated += spec.numel();
    const std::size_t expected = 2 * r * d + 27 * r * r;
    ok &= enumerated == expected;
    detail << "d=" << d << ",r=" << r << ": " << enumerated << "/" << expected << " ";
  }
  ok &= spatial_adapter_param_count(64, 8, 3) == 2752;
  return {ok, detail.str()};
}

Verdict zero_init_identity() {
  auto cfg = tiny_config(16, 2, 16);
  auto frozen = Model::initialized(cfg, 3);
  double worst = 0.0;
  for (Method m : {Method::Adapter, Method::Lora, Method::Gem, Method::GemSaOnly, Method::GemCaOnly}) {
    auto attached = frozen.clone();
    attached.attach(peft(m, 4, 4), 9);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto cloud = random_cloud(16 + 24 * seed, 100 + seed);
      auto a = frozen.forward(frozen.prepare(cloud)).logits;
      auto b = attached.forward(attached.prepare(cloud)).logits;
      worst = std::max(worst, max_abs_diff(a.data(), b.data()));
    }
  }
  return {worst < 1e-12, "max |diff| " + fmt("%.3g", worst)};
}

Verdict gradient_fidelity() {
  auto cfg = tiny_config(16, 2, 8);
  auto model = Model::initialized(cfg, 4);
  model.attach(peft(Method::Gem, 4, 2), 5);
  perturb(model.params(), "peft.", 6);
  auto cloud = random_cloud(32, 7);
  auto pc = model.prepare(cloud);
  auto r = check_gradients([&] { return cross_entropy(model.forward(pc).logits, cloud.labels); }, model.params(),
                           1e-5);
  return {r.max_rel_error < 1e-4 && r.checked == model.params().trainable_count(),
          std::to_string(r.checked) + " scalars, max rel err " + fmt("%.3g", r.max_rel_error) + " at " +
              r.worst_param};
}

Verdict local_attention_oracle() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 8 + (seed * 37) % 57, d = 8, heads = 2, p = seed % 2 ? 4 : 16;
    auto q = random_values(n * d, seed * 3 + 1, -2, 2), k = random_values(n * d, seed * 3 + 2, -2, 2),
         v = random_values(n * d, seed * 3 + 3);
    auto cloud = random_cloud(n, seed);
    auto cfg = tiny_config(d, 1, p);
    auto pc = prepare_cloud(cloud, cfg);
    auto out = patch_attention(Tensor::from({n, d}, q), Tensor::from({n, d}, k), Tensor::from({n, d}, v), pc.part,
                               heads);
    auto oracle = dense_masked_attention(q, k, v, n, d, heads, pc.part.patch_of_point());
    worst = std::max(worst, max_abs_diff(out.data(), oracle));
  }
  return {worst < 1e-10, "max |diff| " + fmt("%.3g", worst)};
}

Verdict freeze_discipline() {
  auto cfg = desk_config();
  auto data = generate_dataset(target_scene_spec(16), 4, 5).clouds;
  auto base = Model::initialized(cfg, 1);
  std::set<std::string> bias_names;
  for (const auto& n : base.params().names("backbone."))
    if (ends_with(n, ".bias") || ends_with(n, ".shift")) bias_names.insert(n);
  TrainConfig t;
  t.epochs = 5;
  t.batch_size = 2;
  t.eval_every = 0;
  bool ok = true;
  std::ostringstream detail;
  for (Method m : all_methods()) {
    auto model = base.clone();
    model.attach(peft(m, 4, 2), 2);
    auto before = model.params().clone();
    finetune(model, data, t);
    auto changed = changed_names(before, model.params(), "backbone.");
    const bool good = m == Method::BitFit ? std::set<std::string>(changed.begin(), changed.end()) == bias_names
                                          : changed.empty();
    ok &= good;
    detail << method_name(m) << ":" << changed.size() << (good ? "" : "!") << " ";
  }
  return {ok, "changed backbone entries " + detail.str()};
}

Verdict complexity_instrumentation() {
  auto cfg = tiny_config(16, 2, 8);
  auto model = Model::initialized(cfg, 1);
  model.attach(peft(Method::Gem, 4, 4), 2);
  const double ca_n = count_pass(model, random_cloud(128, 1)).total_matching(".ca.");
  const double ca_2n = count_pass(model, random_cloud(256, 2)).total_matching(".ca.");
  const double ca_ratio = ca_2n / ca_n;

  auto cloud = random_cloud(128, 3);
  auto attn_at = [&](std::size_t p) {
    auto m = Model::initialized(tiny_config(16, 2, p), 1);
    return static_cast<double>(count_pass(m, cloud).total_matching("local_attn"));
  };
  const double attn_ratio = attn_at(16) / attn_at(8);
  const bool ok = ca_ratio >= 1.98 && ca_ratio <= 2.02 && attn_ratio >= 1.96 && attn_ratio <= 2.04;
  return {ok, "ca 2n/n " + fmt("%.4f", ca_ratio) + ", local_attn 2p/p " + fmt("%.4f", attn_ratio)};
}

Verdict globality_contrast() {
  auto cfg = tiny_config(16, 2, 8);
  auto cloud = random_cloud(64, 5, 2.0);
  auto sensitivity = [&](Method m) {
    auto model = Model::initialized(cfg, 2);
    model.attach(peft(m, 4, 2), 3);
    for (const auto& n : model.params().names("peft."))
      if (ends_with(n, ".up")) perturb(model.params(), n, 4);
    auto pc = model.prepare(cloud);
    auto patch = pc.part.patch_of_point();
    std::size_t a = 0, b = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < cloud.size(); ++i)
      for (std::size_t j = 0; j < cloud.size(); ++j) {
        if (patch[i] == patch[j]) continue;
        auto p = cloud.point(i), q = cloud.point(j);
        const double dist = std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        if (dist > best) best = dist, a = i, b = j;
      }
    const double h = 1e-3;
    auto plus = cloud, minus = cloud;
    plus.feats[b * cloud.channels + 3] += h;
    minus.feats[b * cloud.channels + 3] -= h;
    auto lp = model.forward(model.prepare(plus)).logits, lm = model.forward(model.prepare(minus)).logits;
    double s = 0.0;
    for (std::size_t c = 0; c < lp.cols(); ++c) s = std::max(s, std::abs(lp.at(a, c) - lm.at(a, c)) / (2 * h));
    return s;
  };
  const double sa = sensitivity(Method::GemSaOnly), gem = sensitivity(Method::Gem);
  return {sa == 0.0 && gem > 0.0, "gem_sa_only " + fmt("%.3g", sa) + ", gem " + fmt("%.3g", gem)};
}

Verdict transfer_benefit() {
  const auto cfg = desk_config();
  auto source = generate_dataset(source_scene_spec(), 64, 1).clouds;
  auto target = generate_dataset(target_scene_spec(), 32, 2).clouds;
  auto target_eval = generate_dataset(target_scene_spec(), 16, 3).clouds;
  auto backbone = Model::initialized(cfg, 7);
  TrainConfig pre;
  pre.epochs = 50;
  pre.eval_every = 0;
  pretrain(backbone, source, pre);

  const std::vector<Method> methods{Method::Linear, Method::GemSaOnly, Method::GemCaOnly, Method::Gem};
  std::map<Method, std::vector<double>> scores;
  for (std::uint64_t seed = 0; seed < 3; ++seed)
    for (Method m : methods) {
      auto model = backbone.clone();
      PeftConfig p;
      p.method = m;
      model.attach(p, 11 + seed);
      TrainConfig ft;
      ft.epochs = 40;
      ft.seed = seed;
      ft.eval_every = 0;
      finetune(model, target, ft);
      scores[m].push_back(evaluate(model, target_eval).miou);
    }
  const double lin = median(scores[Method::Linear]), sa = median(scores[Method::GemSaOnly]),
               ca = median(scores[Method::GemCaOnly]), gem = median(scores[Method::Gem]);
  const bool ok = gem >= sa && gem >= ca && sa >= lin && ca >= lin && gem - lin >= 0.05;
  return {ok, "median mIoU linear " + fmt("%.4f", lin) + ", gem_sa_only " + fmt("%.4f", sa) + ", gem_ca_only " +
                  fmt("%.4f", ca) + ", gem " + fmt("%.4f", gem)};
}

Verdict ablation_grid() {
  const auto cfg = desk_config();
  auto source = generate_dataset(source_scene_spec(24), 8, 21).clouds;
  auto target = generate_dataset(target_scene_spec(18), 6, 22).clouds;
  auto target_eval = generate_dataset(target_scene_spec(18), 4, 23).clouds;
  auto backbone = Model::initialized(cfg, 7);
  TrainConfig pre;
  pre.epochs = 5;
  pre.eval_every = 0;
  pretrain(backbone, source, pre);

  KeyValues kv;
  kv.set("methods", "gem");
  kv.set("ranks", "8");
  kv.set("tokens", "1,4,8");
  kv.set("sharing", "per_block,per_stage,global");
  kv.set("seeds", "0");
  kv.set("epochs", "3");
  auto spec = SweepSpec::from_kv(kv);
  auto rows = run_sweep(spec, backbone, target, target_eval, 1);
  auto csv = sweep_csv(rows);

  std::set<std::pair<std::size_t, Sharing>> seen;
  bool complete = true;
  for (const auto& row : rows) {
    complete &= row.error.empty() && row.metrics.has_value() && row.exit_code == 0;
    seen.insert({row.cell.peft.tokens, row.cell.peft.sharing});
  }
  bool grid = seen.size() == 9 && rows.size() == 9;
  for (std::size_t m : {1u, 4u, 8u})
    for (Sharing s : {Sharing::PerBlock, Sharing::PerStage, Sharing::Global}) {
      grid &= seen.count({m, s}) == 1;
      grid &= csv.find("gem,8," + std::to_string(m) + "," + sharing_name(s) + ",0,") != std::string::npos;
    }

  auto model = backbone.clone();
  model.attach(peft(Method::Gem, 8, 4, Sharing::Global), 1);
  perturb(model.params(), "peft.", 9);
  auto res = model.forward(model.prepare(target_eval.front()));
  const auto& h = res.latent.history;
  bool propagates = h.size() == cfg.blocks;
  bool nontrivial = false;
  for (std::size_t i = 0; propagates && i + 1 < h.size(); ++i)
    for (std::size_t j = 0; j < h[i].input.size(); ++j) {
      propagates &= h[i + 1].input[j] == h[i].input[j] + h[i].context[j];
      nontrivial |= h[i].context[j] != 0.0;
    }
  return {complete && grid && propagates && nontrivial,
          std::to_string(rows.size()) + " cells" + (complete ? " complete" : " with failures") +
              (grid ? ", grid matches" : ", grid mismatch") +
              (propagates && nontrivial ? ", L <- L + L_c across " : ", propagation broken across ") +
              std::to_string(h.size()) + " blocks"};
}

Verdict metrics_correctness() {
  auto model = Model::initialized(tiny_config(), 1);
  auto w = model.params().get("head.weight").mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = model.params().get("head.bias").mutable_data();
  b[0] = 1.0, b[1] = 0.0, b[2] = 0.0;
  auto cloud = random_cloud(12, 1);
  for (std::size_t i = 0; i < cloud.size(); ++i) cloud.labels[i] = static_cast<int>(i % 2);
  auto m = evaluate(model, {cloud});
  // classes 0 and 1 present, class 2 absent; everything predicted 0:
  //   allAcc 6/12, mAcc (1 + 0)/2, IoU0 6/12, IoU1 0
  const bool constant_ok = m.allacc == 0.5 && m.macc == 0.5 && m.miou == 0.25;

  // Hand fixture with errors in every direction.
  //   truth 0: predicted 0,0,1    truth 1: 1,1,2,0    truth 2: 2
  ConfusionMatrix cm(3);
  for (auto [t, p] : std::vector<std::pair<int, int>>{{0, 0}, {0, 0}, {0, 1}, {1, 1}, {1, 1}, {1, 2}, {1, 0}, {2, 2}})
    cm.add(t, p);
  auto h = cm.metrics();
  const double iou = (2.0 / 4.0 + 2.0 / 5.0 + 1.0 / 2.0) / 3.0;
  const double acc = (2.0 / 3.0 + 2.0 / 4.0 + 1.0) / 3.0;
  const bool fixture_ok =
      std::abs(h.miou - iou) < 1e-15 && std::abs(h.macc - acc) < 1e-15 && std::abs(h.allacc - 5.0 / 8.0) < 1e-15;
  return {constant_ok && fixture_ok, "constant predictor allAcc " + fmt("%.4f", m.allacc) + " mAcc " +
                                         fmt("%.4f", m.macc) + " mIoU " + fmt("%.4f", m.miou) +
                                         (fixture_ok ? ", mixed fixture matches" : ", mixed fixture differs")};
}

Verdict budget_feasibility() {
  BackboneConfig wide;
  wide.width = 512;
  wide.blocks = 8;
  bool ok = true;
  std::ostringstream detail;
  for (double frac : {0.001, 0.01})
    for (Method m : all_methods()) {
      if (!uses_rank(m)) continue;
      auto fit = budget_fit(m, Budget{frac, std::nullopt}, wide);
      auto next = fit.config;
      next.rank += 1;
      next.tokens = scaled_tokens(next.rank);
      const bool good = fit.counts.fraction() <= frac && count_params(wide, next).fraction() > frac &&
                        fit.counts.trainable == count_params(wide, fit.config).trainable;
      ok &= good;
      detail << method_name(m) << "@" << frac << ":r" << fit.config.rank << (good ? "" : "!") << " ";
    }
  return {ok, detail.str()};
}

Verdict attention_dump_contract() {
  auto cfg = tiny_config(16, 2, 8);
  auto model = Model::initialized(cfg, 2);
  model.attach(peft(Method::Gem, 4, 3), 3);
  perturb(model.params(), "peft.", 4);
  auto a = random_cloud(96, 1);
  auto b = random_cloud(96, 2);
  for (std::size_t i = 0; i < b.size(); ++i) {
    b.coords[3 * i] *= 0.35;
    b.coords[3 * i + 2] = 1.0 - b.coords[3 * i + 2] * b.coords[3 * i + 2];
  }
  auto da = capture_attention(model, a), db = capture_attention(model, b);
  double worst_row = 0.0;
  for (const auto* dump : {&da, &db})
    for (const auto& mtx : dump->latent_to_points)
      for (std::size_t t = 0; t < mtx.rows; ++t) {
        double s = 0.0;
        for (std::size_t i = 0; i < mtx.cols; ++i) s += mtx.weights[t * mtx.cols + i];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
  const bool rows_ok = !da.latent_to_points.empty() && worst_row < 1e-9;
  double js = 0.0;
  for (std::size_t t = 0; t < da.latent_to_points[0].rows; ++t) {
    const auto& wa = da.latent_to_points[0].weights;
    const auto& wb = db.latent_to_points[0].weights;
    std::vector<double> ta(wa.begin() + t * a.size(), wa.begin() + (t + 1) * a.size());
    std::vector<double> tb(wb.begin() + t * b.size(), wb.begin() + (t + 1) * b.size());
    js = std::max(js, js_divergence(spatial_histogram(a, ta, 0.0, 1.0, 4), spatial_histogram(b, tb, 0.0, 1.0, 4)));
  }

  auto prompt = Model::initialized(cfg, 2);
  prompt.attach(peft(Method::Prompt, 4, 3), 3);
  perturb(prompt.params(), "peft.", 5);
  auto snapshot = prompt.params().clone();
  auto pa = capture_attention(prompt, a);
  auto pb = capture_attention(prompt, b);
  const bool prompts_static =
      changed_names(snapshot, prompt.params(), "peft.").empty() && !pa.prompt_weights.empty() &&
      !pb.prompt_weights.empty();

  auto la = model.forward(model.prepare(a)).latent.history, lb = model.forward(model.prepare(b)).latent.history;
  const bool latents_dynamic = la.size() > 1 && la[1].input != lb[1].input;
  return {rows_ok && js > 0.0 && prompts_static && latents_dynamic,
          "row-sum err " + fmt("%.3g", worst_row) + ", JS " + fmt("%.4g", js) +
              (prompts_static ? ", prompt tokens identical across clouds" : ", prompt tokens varied") +
              (latents_dynamic ? ", latent tokens scene-dependent" : ", latent tokens static")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "parameter-count formula", parameter_count_formula},
      {2, "zero-init identity", zero_init_identity},
      {3, "gradient fidelity", gradient_fidelity},
      {4, "local-attention oracle", local_attention_oracle},
      {5, "freeze discipline", freeze_discipline},
      {6, "complexity instrumentation", complexity_instrumentation},
      {7, "globality contrast", globality_contrast},
      {8, "desk-scale transfer benefit", transfer_benefit},
      {9, "ablation grid structure", ablation_grid},
      {10, "metrics correctness", metrics_correctness},
      {11, "budget feasibility", budget_feasibility},
      {12, "attention-dump contract", attention_dump_contract},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gemlab acceptance suite"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-12)")->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  for (const auto& c : criteria()) {
    if (only && c.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !v.pass;
  }
  return failures ? 1 : 0;
}
