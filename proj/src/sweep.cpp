#include "gemlab/sweep.hpp"

#include <atomic>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>
#include <tuple>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace {

template <typename T, typename F>
std::vector<T> parse_list(const KeyValues& kv, const std::string& key, F parse) {
  std::vector<T> out;
  for (const auto& s : kv.get_list(key)) out.push_back(parse(s));
  if (out.empty()) throw ConfigError("sweep: '" + key + "' lists no values");
  return out;
}

std::size_t parse_size(const std::string& s) {
  auto v = parse_int(s);
  if (v < 1) throw ConfigError("sweep: expected a positive integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

Budget parse_budget(const std::string& s) {
  Budget b;
  if (starts_with(s, "rank")) b.rank = parse_size(s.substr(4));
  else b.fraction = parse_double(s);
  return b;
}

}  // namespace

SweepSpec SweepSpec::from_kv(const KeyValues& kv) {
  static const std::set<std::string> known{"methods", "ranks", "tokens",     "sharing",       "budgets", "seeds",
                                           "epochs",  "lr",    "batch_size", "weight_decay", "optimizer", "schedule",
                                           "subset_fraction", "subset_seed"};
  for (const auto& [k, v] : kv.values())
    if (!known.contains(k)) throw ConfigError("sweep: unknown key '" + k + "'");
  SweepSpec spec;
  spec.methods = parse_list<Method>(kv, "methods", parse_method);
  if (kv.has("ranks")) spec.ranks = parse_list<std::size_t>(kv, "ranks", parse_size);
  if (kv.has("tokens")) spec.tokens = parse_list<std::size_t>(kv, "tokens", parse_size);
  if (kv.has("sharing")) spec.sharing = parse_list<Sharing>(kv, "sharing", parse_sharing);
  if (kv.has("budgets")) {
    spec.budgets = kv.get_list("budgets");
    for (const auto& b : spec.budgets) parse_budget(b);
  }
  if (kv.has("seeds"))
    spec.seeds = parse_list<std::uint64_t>(kv, "seeds", [](const std::string& s) {
      return static_cast<std::uint64_t>(parse_int(s));
    });
  if (kv.has("epochs")) spec.train.epochs = parse_size(kv.get("epochs"));
  if (kv.has("lr")) spec.train.learning_rate = kv.get_double("lr");
  if (kv.has("batch_size")) spec.train.batch_size = parse_size(kv.get("batch_size"));
  if (kv.has("weight_decay")) spec.train.weight_decay = kv.get_double("weight_decay");
  if (kv.has("optimizer")) spec.train.optimizer = parse_optimizer(kv.get("optimizer"));
  if (kv.has("schedule")) spec.train.schedule = parse_schedule(kv.get("schedule"));
  if (kv.has("subset_fraction")) spec.train.subset_fraction = kv.get_double("subset_fraction");
  if (kv.has("subset_seed")) spec.train.subset_seed = static_cast<std::uint64_t>(kv.get_int("subset_seed"));
  spec.train.eval_every = 0;
  spec.train.validate();
  return spec;
}

std::vector<SweepCell> expand_cells(const SweepSpec& spec) {
  std::vector<SweepCell> cells;
  std::set<std::tuple<int, std::size_t, std::size_t, int, std::uint64_t, std::string>> seen;
  const std::vector<std::string> budgets = spec.budgets.empty() ? std::vector<std::string>{""} : spec.budgets;
  for (Method m : spec.methods)
    for (const auto& budget : budgets)
      for (std::size_t r : spec.ranks)
        for (std::size_t t : spec.tokens)
          for (Sharing s : spec.sharing)
            for (std::uint64_t seed : spec.seeds) {
              PeftConfig cfg;
              cfg.method = m;
              cfg.rank = uses_rank(m) ? r : 1;
              cfg.tokens = uses_tokens(m) ? t : 1;
              cfg.sharing = has_context_adapter(m) ? s : Sharing::Global;
              auto key = std::make_tuple(static_cast<int>(m), budget.empty() ? cfg.rank : 0,
                                         budget.empty() ? cfg.tokens : 0, static_cast<int>(cfg.sharing), seed, budget);
              if (!seen.insert(key).second) continue;
              cells.push_back({cells.size(), cfg, seed, budget});
            }
  return cells;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ContractError*>(&e)) return 2;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 1;
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, const Model& backbone, const std::vector<PointCloud>& train,
                                const std::vector<PointCloud>& eval, std::size_t jobs, std::ostream* log) {
  if (backbone.peft()) throw ContractError("sweep: backbone already carries an attachment");
  const auto cells = expand_cells(spec);
  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      SweepRow row;
      row.cell = cells[i];
      try {
        if (!row.cell.budget.empty())
          row.cell.peft = budget_fit(row.cell.peft.method, parse_budget(row.cell.budget), backbone.config(),
                                     row.cell.peft)
                              .config;
        Model model = backbone.clone();
        model.attach(row.cell.peft, row.cell.seed);
        row.counts = {model.params().trainable_count(), model.params().total_count()};
        TrainConfig tc = spec.train;
        tc.seed = row.cell.seed;
        auto rec = finetune(model, train, tc, &eval);
        row.metrics = rec.final_metrics();
      } catch (const std::exception& e) {
        row.error = e.what();
        row.exit_code = exit_code_for(e);
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << "cell " << i << " " << method_name(row.cell.peft.method)
             << (row.error.empty() ? " done" : " failed: " + row.error) << "\n";
      }
      rows[i] = std::move(row);
    }
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "method,rank,tokens,sharing,seed,params_pct,miou,macc,allacc\n";
  for (const auto& row : rows) {
    const auto& c = row.cell.peft;
    out += method_name(c.method) + ",";
    out += (uses_rank(c.method) ? std::to_string(c.rank) : "-") + ",";
    out += (uses_tokens(c.method) ? std::to_string(c.tokens) : "-") + ",";
    out += (has_context_adapter(c.method) ? sharing_name(c.sharing) : "-") + ",";
    out += std::to_string(row.cell.seed) + ",";
    out += row.counts.total ? format_double(100.0 * row.counts.fraction()) : "nan";
    if (row.metrics)
      out += "," + format_double(row.metrics->miou) + "," + format_double(row.metrics->macc) + "," +
             format_double(row.metrics->allacc);
    else
      out += ",nan,nan,nan";
    out += "\n";
  }
  return out;
}

}  // namespace gemlab
