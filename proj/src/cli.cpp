#include "gemlab/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "gemlab/errors.hpp"
#include "gemlab/profile.hpp"
#include "gemlab/scene.hpp"
#include "gemlab/sweep.hpp"

namespace gemlab::cli {

namespace {

std::string join_argv(const std::vector<std::string>& argv) {
  std::string s;
  for (std::size_t i = 0; i < argv.size(); ++i) s += (i ? " " : "") + argv[i];
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << text;
}

/// CSV artifact with the producing command and config hash as comment lines.
void write_csv(const std::string& path, const std::string& csv, const std::string& command, const std::string& hash) {
  write_text(path, "# command: " + command + "\n# config-hash: " + hash + "\n" + csv);
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& s : split(text, ',')) {
    auto v = parse_int(trim(s));
    if (v < 0) throw ConfigError("expected non-negative integers in '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

struct BackboneFlags {
  std::size_t width = 64, blocks = 8, heads = 4, patch = 16, ffn_mult = 4;
  std::string stages;
  double grid_size = 0.02, voxel_size = 0.3;

  void add_to(CLI::App* app) {
    app->add_option("--width", width, "Model width d")->capture_default_str();
    app->add_option("--blocks", blocks, "Transformer blocks")->capture_default_str();
    app->add_option("--heads", heads, "Attention heads")->capture_default_str();
    app->add_option("--patch", patch, "Points per attention patch")->capture_default_str();
    app->add_option("--ffn-mult", ffn_mult, "FFN hidden width multiplier")->capture_default_str();
    app->add_option("--stages", stages, "Blocks per stage, comma separated (default: pairs)");
    app->add_option("--grid-size", grid_size, "Serialization grid size")->capture_default_str();
    app->add_option("--voxel-size", voxel_size, "Spatial adapter voxel size")->capture_default_str();
  }

  BackboneConfig build(std::size_t in_channels, std::size_t classes) const {
    BackboneConfig c;
    c.in_channels = in_channels;
    c.classes = classes;
    c.width = width;
    c.blocks = blocks;
    c.heads = heads;
    c.patch = patch;
    c.ffn_mult = ffn_mult;
    c.grid_size = grid_size;
    c.voxel_size = voxel_size;
    if (!stages.empty()) {
      c.stage_blocks = parse_sizes(stages);
    } else {
      c.stage_blocks.assign(blocks / 2, 2);
      if (blocks % 2) c.stage_blocks.push_back(1);
    }
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string optimizer = "adamw", schedule = "cosine";

  void add_to(CLI::App* app, std::size_t default_epochs) {
    cfg.epochs = default_epochs;
    app->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    app->add_option("--lr", cfg.learning_rate, "Peak learning rate")->capture_default_str();
    app->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay")->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size, "Clouds per optimizer step")->capture_default_str();
    app->add_option("--seed", cfg.seed, "Seed for init and shuffling")->capture_default_str();
    app->add_option("--optimizer", optimizer, "adamw or sgd_momentum")->capture_default_str();
    app->add_option("--schedule", schedule, "cosine or constant")->capture_default_str();
    app->add_option("--eval-every", cfg.eval_every, "Evaluate every N epochs (0: last only)")->capture_default_str();
  }

  TrainConfig build() const {
    TrainConfig c = cfg;
    c.optimizer = parse_optimizer(optimizer);
    c.schedule = parse_schedule(schedule);
    c.validate();
    return c;
  }
};

struct PeftFlags {
  std::string method;
  std::size_t rank = 8, tokens = 4;
  std::string sharing = "global", insert_blocks;

  void add_to(CLI::App* app, bool method_required) {
    auto* opt = app->add_option("--method", method, "linear, bitfit, adapter, lora, prompt, gem, gem_sa_only, gem_ca_only");
    if (method_required) opt->required();
    app->add_option("--rank", rank, "Bottleneck rank r")->capture_default_str();
    app->add_option("--tokens", tokens, "Latent or prompt tokens m")->capture_default_str();
    app->add_option("--sharing", sharing, "per_block, per_stage or global")->capture_default_str();
    app->add_option("--insert-blocks", insert_blocks, "Blocks receiving per-block hooks (default: all)");
  }

  PeftConfig build() const {
    PeftConfig c;
    c.method = parse_method(method);
    c.rank = rank;
    c.tokens = tokens;
    c.sharing = parse_sharing(sharing);
    if (!insert_blocks.empty()) c.blocks = parse_sizes(insert_blocks);
    return c;
  }
};

struct CloudFlags {
  std::string cloud, data;
  std::size_t index = 0;

  void add_to(CLI::App* app) {
    app->add_option("--cloud", cloud, "Point cloud file");
    app->add_option("--data", data, "Dataset directory (with --index)");
    app->add_option("--index", index, "Cloud index within --data")->capture_default_str();
  }

  PointCloud load() const {
    if (!cloud.empty()) return read_point_cloud(cloud);
    if (data.empty()) throw ArgumentError("give --cloud or --data");
    auto ds = read_dataset(data);
    if (index >= ds.clouds.size())
      throw ArgumentError("--index " + std::to_string(index) + " outside dataset of " +
                          std::to_string(ds.clouds.size()));
    return std::move(ds.clouds[index]);
  }
};

void print_metrics(std::ostream& out, const std::string& label, const Metrics& m) {
  out << label << " miou=" << format_double(m.miou) << " macc=" << format_double(m.macc)
      << " allacc=" << format_double(m.allacc) << "\n";
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const std::string command = join_argv(argv);
  CLI::App app{"Parameter-efficient fine-tuning lab for point-cloud transformers", "gemlab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  std::string gen_spec, gen_preset, gen_out;
  std::size_t gen_count = 0, gen_points = 0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--spec", gen_spec, "Scene spec file (key=value)");
  gen->add_option("--preset", gen_preset, "source or target")->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--points", gen_points, "Points per primitive for --preset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->required();
  gen->add_option("--seed", gen_seed, "Master seed")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Supervised training of every backbone parameter");
  BackboneFlags pre_bb;
  TrainFlags pre_train;
  std::string pre_data, pre_eval, pre_out, pre_metrics, pre_record;
  pre_bb.add_to(pre);
  pre_train.add_to(pre, 50);
  pre->add_option("--data", pre_data, "Training dataset directory")->required();
  pre->add_option("--eval", pre_eval, "Evaluation dataset directory");
  pre->add_option("--out", pre_out, "Backbone checkpoint path")->required();
  pre->add_option("--metrics", pre_metrics, "Per-epoch metrics CSV");
  pre->add_option("--record", pre_record, "Run record path");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Train a PEFT attachment on a frozen backbone");
  PeftFlags ft_peft;
  TrainFlags ft_train;
  std::string ft_backbone, ft_data, ft_eval, ft_out, ft_metrics, ft_record;
  std::optional<double> ft_fraction;
  double ft_subset = 1.0;
  std::uint64_t ft_subset_seed = 0;
  ft_peft.add_to(ft, true);
  ft_train.add_to(ft, 40);
  ft->add_option("--backbone", ft_backbone, "Backbone checkpoint")->required();
  ft->add_option("--data", ft_data, "Target training dataset directory")->required();
  ft->add_option("--eval", ft_eval, "Evaluation dataset directory");
  ft->add_option("--out", ft_out, "PEFT checkpoint path")->required();
  ft->add_option("--metrics", ft_metrics, "Per-epoch metrics CSV");
  ft->add_option("--record", ft_record, "Run record path");
  ft->add_option("--fraction", ft_fraction, "Fit rank/tokens to this trainable-parameter budget");
  ft->add_option("--subset", ft_subset, "Fraction of training scenes used")->capture_default_str();
  ft->add_option("--subset-seed", ft_subset_seed, "Seed for the training subset")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a backbone or PEFT checkpoints");
  std::string ev_backbone, ev_data, ev_out;
  std::vector<std::string> ev_peft;
  ev->add_option("--backbone", ev_backbone, "Backbone checkpoint")->required();
  ev->add_option("--peft", ev_peft, "PEFT checkpoint (repeatable for comparison)");
  ev->add_option("--data", ev_data, "Annotated dataset directory")->required();
  ev->add_option("--out", ev_out, "Metrics CSV");

  // budget
  auto* bud = app.add_subcommand("budget", "Largest configuration within a parameter budget");
  BackboneFlags bud_bb;
  std::string bud_backbone, bud_method;
  std::optional<double> bud_fraction;
  std::optional<std::size_t> bud_rank;
  std::size_t bud_in = 6, bud_classes = 3;
  bud_bb.add_to(bud);
  bud->add_option("--backbone", bud_backbone, "Backbone checkpoint (otherwise the flags describe it)");
  bud->add_option("--method", bud_method, "PEFT method")->required();
  auto* frac_opt = bud->add_option("--fraction", bud_fraction, "Budget as trainable/total");
  auto* rank_opt = bud->add_option("--rank", bud_rank, "Fixed-rank budget");
  frac_opt->excludes(rank_opt);
  bud->add_option("--in-channels", bud_in, "Input channels without --backbone")->capture_default_str();
  bud->add_option("--classes", bud_classes, "Classes without --backbone")->capture_default_str();

  // dump-attn
  auto* dump = app.add_subcommand("dump-attn", "Write attention weights of global tokens as CSV");
  std::string dump_backbone, dump_peft, dump_out;
  int dump_stage = 1;
  CloudFlags dump_cloud;
  dump->add_option("--backbone", dump_backbone, "Backbone checkpoint")->required();
  dump->add_option("--peft", dump_peft, "PEFT checkpoint")->required();
  dump->add_option("--out", dump_out, "Output directory (one CSV per block)")->required();
  dump->add_option("--stage", dump_stage, "1: latent->points, 2: points->latent")->check(CLI::Range(1, 2));
  dump_cloud.add_to(dump);

  // count-ops
  auto* cnt = app.add_subcommand("count-ops", "Multiply-add tallies of one forward pass");
  std::string cnt_backbone, cnt_peft, cnt_out;
  PeftFlags cnt_method;
  CloudFlags cnt_cloud;
  cnt->add_option("--backbone", cnt_backbone, "Backbone checkpoint")->required();
  cnt->add_option("--peft", cnt_peft, "PEFT checkpoint");
  cnt_method.add_to(cnt, false);
  cnt->add_option("--out", cnt_out, "site,count CSV (default: stdout)");
  cnt_cloud.add_to(cnt);

  // sweep
  auto* sw = app.add_subcommand("sweep", "Run a grid of fine-tuning cells");
  std::string sw_config, sw_backbone, sw_data, sw_eval, sw_out;
  std::size_t sw_jobs = 1;
  sw->add_option("--config", sw_config, "Sweep grid file")->required();
  sw->add_option("--backbone", sw_backbone, "Backbone checkpoint")->required();
  sw->add_option("--data", sw_data, "Target training dataset")->required();
  sw->add_option("--eval", sw_eval, "Evaluation dataset (default: --data)");
  sw->add_option("--out", sw_out, "Results CSV")->required();
  sw->add_option("--jobs", sw_jobs, "Concurrent cells")->capture_default_str();

  std::vector<const char*> cargv;
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*gen) {
      SceneSpec spec;
      if (!gen_spec.empty() == !gen_preset.empty()) throw ArgumentError("give exactly one of --spec or --preset");
      if (!gen_spec.empty()) {
        spec = SceneSpec::from_kv(KeyValues::load(gen_spec));
      } else {
        spec = gen_preset == "source" ? source_scene_spec() : target_scene_spec();
        if (gen_points) spec = gen_preset == "source" ? source_scene_spec(gen_points) : target_scene_spec(gen_points);
      }
      auto data = generate_dataset(spec, gen_count, gen_seed);
      write_dataset(gen_out, data, command);
      out << "config-hash " << data.spec_hash << "\n";
      out << "wrote " << data.clouds.size() << " clouds to " << gen_out << "\n";
      return 0;
    }

    if (*pre) {
      auto data = read_dataset(pre_data);
      const auto& first = data.clouds.front();
      Model model = Model::initialized(pre_bb.build(first.channels, first.num_classes), pre_train.cfg.seed);
      TrainConfig tc = pre_train.build();
      std::optional<Dataset> eval_data;
      if (!pre_eval.empty()) eval_data = read_dataset(pre_eval);
      KeyValues extra = tc.to_kv();
      extra.set("data.spec_hash", data.spec_hash);
      KeyValues run_kv = model.config_kv();
      for (const auto& [k, v] : extra.values()) run_kv.set(k, v);
      out << "config-hash " << run_kv.hash() << "\n";
      auto rec = pretrain(model, data.clouds, tc, eval_data ? &eval_data->clouds : &data.clouds);
      rec.config_hash = run_kv.hash();
      save_backbone(pre_out, model, extra, command);
      if (!pre_metrics.empty()) write_csv(pre_metrics, rec.metrics_csv(), command, run_kv.hash());
      if (!pre_record.empty()) write_text(pre_record, "# command: " + command + "\n" + rec.to_text());
      out << "params trainable=" << rec.trainable << " total=" << rec.total << "\n";
      out << "loss first=" << format_double(rec.epochs.front().loss) << " last=" << format_double(rec.epochs.back().loss)
          << "\n";
      if (auto m = rec.final_metrics()) print_metrics(out, "final", *m);
      out << "checkpoint " << pre_out << " hash " << load_checkpoint(pre_out).config.hash() << "\n";
      return 0;
    }

    if (*ft) {
      auto [backbone, bb_hash] = load_backbone(ft_backbone);
      PeftConfig pc = ft_peft.build();
      if (ft_fraction) pc = budget_fit(pc.method, Budget{*ft_fraction, std::nullopt}, backbone.config(), pc).config;
      Model model = backbone.clone();
      model.attach(pc, ft_train.cfg.seed);
      TrainConfig tc = ft_train.build();
      tc.subset_fraction = ft_subset;
      tc.subset_seed = ft_subset_seed;
      tc.validate();
      auto data = read_dataset(ft_data);
      std::optional<Dataset> eval_data;
      if (!ft_eval.empty()) eval_data = read_dataset(ft_eval);
      KeyValues extra = tc.to_kv();
      extra.set("data.spec_hash", data.spec_hash);
      KeyValues run_kv = model.config_kv();
      for (const auto& [k, v] : extra.values()) run_kv.set(k, v);
      run_kv.set("backbone_hash", bb_hash);
      out << "config-hash " << run_kv.hash() << "\n";
      auto rec = finetune(model, data.clouds, tc, eval_data ? &eval_data->clouds : &data.clouds);
      rec.config_hash = run_kv.hash();
      save_peft(ft_out, model, bb_hash, extra, command);
      if (!ft_metrics.empty()) write_csv(ft_metrics, rec.metrics_csv(), command, run_kv.hash());
      if (!ft_record.empty()) write_text(ft_record, "# command: " + command + "\n" + rec.to_text());
      out << "method " << method_name(pc.method) << " rank " << pc.rank << " tokens " << pc.tokens << " sharing "
          << sharing_name(pc.sharing) << "\n";
      out << "params trainable=" << rec.trainable << " total=" << rec.total << " fraction="
          << format_double(static_cast<double>(rec.trainable) / static_cast<double>(rec.total)) << "\n";
      out << "subset clouds=" << rec.train_clouds << " fraction=" << format_double(rec.subset_fraction)
          << " seed=" << rec.subset_seed << "\n";
      if (auto m = rec.final_metrics()) print_metrics(out, "final", *m);
      return 0;
    }

    if (*ev) {
      auto [backbone, bb_hash] = load_backbone(ev_backbone);
      auto data = read_dataset(ev_data);
      KeyValues kv;
      kv.set("backbone_hash", bb_hash);
      kv.set("data.spec_hash", data.spec_hash);
      for (std::size_t i = 0; i < ev_peft.size(); ++i) kv.set("peft." + std::to_string(i), ev_peft[i]);
      out << "config-hash " << kv.hash() << "\n";
      std::vector<std::pair<std::string, Model>> models;
      if (ev_peft.empty()) models.emplace_back("backbone", backbone.clone());
      for (const auto& p : ev_peft) models.emplace_back(p, load_peft(p, backbone, bb_hash));
      std::string csv = "model,miou,macc,allacc\n";
      for (const auto& [name, model] : models) {
        auto m = evaluate(model, data.clouds);
        print_metrics(out, name, m);
        csv += name + "," + format_double(m.miou) + "," + format_double(m.macc) + "," + format_double(m.allacc) + "\n";
      }
      if (!ev_out.empty()) write_csv(ev_out, csv, command, kv.hash());
      return 0;
    }

    if (*bud) {
      BackboneConfig bc = bud_backbone.empty() ? bud_bb.build(bud_in, bud_classes)
                                               : BackboneConfig::from_kv(load_checkpoint(bud_backbone).config);
      if (!bud_fraction && !bud_rank) throw ArgumentError("give --fraction or --rank");
      Budget b{bud_fraction.value_or(0.0), bud_rank};
      KeyValues kv = bc.to_kv();
      kv.set("budget.method", bud_method);
      kv.set("budget", bud_rank ? "rank" + std::to_string(*bud_rank) : format_double(*bud_fraction));
      out << "config-hash " << kv.hash() << "\n";
      auto fit = budget_fit(parse_method(bud_method), b, bc);
      out << "method " << bud_method << " rank " << fit.config.rank << " tokens " << fit.config.tokens << "\n";
      out << "trainable " << fit.counts.trainable << " total " << fit.counts.total << " fraction "
          << format_double(fit.counts.fraction()) << "\n";
      return 0;
    }

    if (*dump) {
      auto [backbone, bb_hash] = load_backbone(dump_backbone);
      Model model = load_peft(dump_peft, backbone, bb_hash);
      auto cloud = dump_cloud.load();
      KeyValues kv = model.config_kv();
      kv.set("backbone_hash", bb_hash);
      kv.set("stage", static_cast<long long>(dump_stage));
      out << "config-hash " << kv.hash() << "\n";
      auto files = dump_attention(model, cloud, dump_out,
                                  dump_stage == 1 ? DumpStage::LatentToPoints : DumpStage::PointsToLatent);
      write_text((std::filesystem::path(dump_out) / "provenance.txt").string(),
                 "command=" + command + "\nconfig_hash=" + kv.hash() + "\n");
      out << "wrote " << files << " block files to " << dump_out << "\n";
      return 0;
    }

    if (*cnt) {
      auto [backbone, bb_hash] = load_backbone(cnt_backbone);
      Model model = backbone.clone();
      if (!cnt_peft.empty()) model = load_peft(cnt_peft, backbone, bb_hash);
      else if (!cnt_method.method.empty()) model.attach(cnt_method.build(), 0);
      auto cloud = cnt_cloud.load();
      KeyValues kv = model.config_kv();
      kv.set("backbone_hash", bb_hash);
      kv.set("points", cloud.size());
      out << "config-hash " << kv.hash() << "\n";
      auto counter = count_pass(model, cloud);
      if (cnt_out.empty()) out << counter.to_csv();
      else write_csv(cnt_out, counter.to_csv(), command, kv.hash());
      out << "total " << counter.total() << "\n";
      return 0;
    }

    if (*sw) {
      auto kv = KeyValues::load(sw_config);
      auto spec = SweepSpec::from_kv(kv);
      auto [backbone, bb_hash] = load_backbone(sw_backbone);
      auto train = read_dataset(sw_data);
      auto eval = sw_eval.empty() ? train : read_dataset(sw_eval);
      KeyValues run_kv = kv;
      run_kv.set("backbone_hash", bb_hash);
      run_kv.set("data.spec_hash", train.spec_hash);
      out << "config-hash " << run_kv.hash() << "\n";
      auto rows = run_sweep(spec, backbone, train.clouds, eval.clouds, sw_jobs, &err);
      write_csv(sw_out, sweep_csv(rows), command, run_kv.hash());
      int worst = 0;
      for (const auto& r : rows) worst = std::max(worst, r.exit_code);
      out << "cells " << rows.size() << " failed "
          << std::count_if(rows.begin(), rows.end(), [](const SweepRow& r) { return !r.error.empty(); }) << "\n";
      return worst;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}

}  // namespace gemlab::cli
