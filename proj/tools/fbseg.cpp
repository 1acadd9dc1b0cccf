// Command-line driver: train / eval / ablate / export-attention / synth.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "fbseg/checkpoint.hpp"
#include "fbseg/experiment.hpp"
#include "fbseg/export.hpp"
#include "fbseg/image_io.hpp"

namespace fs = std::filesystem;
using namespace fbseg;

namespace {

struct RunConfig {
  std::string dataset = "synthetic";
  std::string variant = "self";
  std::string tap = "after-conv2";
  int base_channels = 8;
  int depth = 4;
  int num_classes = 4;
  int epochs = 100;
  int batch_size = 4;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  int seeds = 1;
  int folds = 1;
  bool no_detach = false;
  int tile_size = 64;
  int synth_count = 16;
  int synth_size = 64;
  std::string split;  // "train,val,test" counts; empty = 60/15/25
  std::int64_t position_budget = 8192;
  std::string out = "runs/out";
};

// Plain key=value config file; CLI flags passed explicitly override it.
void apply_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file: " + path);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("bad config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* k, auto& slot) {
    auto it = kv.find(k);
    if (it == kv.end()) return;
    std::istringstream ss(it->second);
    ss >> slot;
    kv.erase(it);
  };
  get("dataset", cfg.dataset);
  get("variant", cfg.variant);
  get("tap", cfg.tap);
  get("base_channels", cfg.base_channels);
  get("depth", cfg.depth);
  get("num_classes", cfg.num_classes);
  get("epochs", cfg.epochs);
  get("batch_size", cfg.batch_size);
  get("lr", cfg.lr);
  get("seed", cfg.seed);
  get("seeds", cfg.seeds);
  get("folds", cfg.folds);
  get("tile_size", cfg.tile_size);
  get("synth_count", cfg.synth_count);
  get("synth_size", cfg.synth_size);
  get("split", cfg.split);
  get("position_budget", cfg.position_budget);
  get("out", cfg.out);
  get("no_detach", cfg.no_detach);
  if (!kv.empty()) throw UsageError("unknown config key: " + kv.begin()->first);
}

TapLocation parse_tap(const std::string& s) {
  if (s == "after-conv1" || s == "one-conv") return TapLocation::AfterConv1;
  if (s == "after-conv2" || s == "two-conv") return TapLocation::AfterConv2;
  throw UsageError("unknown tap '" + s + "' (valid: after-conv1, after-conv2)");
}

void add_common_options(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--dataset", cfg.dataset, "'synthetic' or a directory with images/ labels/");
  cmd->add_option("--variant", cfg.variant,
                  "connector: unet, st, self, add, conv1x1, se, light");
  cmd->add_option("--tap", cfg.tap, "feedback tap: after-conv1 | after-conv2");
  cmd->add_option("--base-channels", cfg.base_channels);
  cmd->add_option("--depth", cfg.depth);
  cmd->add_option("--num-classes", cfg.num_classes);
  cmd->add_option("--epochs", cfg.epochs);
  cmd->add_option("--batch-size", cfg.batch_size);
  cmd->add_option("--lr", cfg.lr);
  cmd->add_option("--seed", cfg.seed, "base RNG seed");
  cmd->add_option("--seeds", cfg.seeds, "number of consecutive seeds (initial values)");
  cmd->add_option("--folds", cfg.folds);
  cmd->add_flag("--no-detach", cfg.no_detach, "backprop through both passes");
  cmd->add_option("--tile-size", cfg.tile_size);
  cmd->add_option("--synth-count", cfg.synth_count);
  cmd->add_option("--synth-size", cfg.synth_size);
  cmd->add_option("--split", cfg.split, "explicit 'train,val,test' tile counts");
  cmd->add_option("--position-budget", cfg.position_budget);
  cmd->add_option("--out", cfg.out, "output directory");
}

RunSettings to_settings(const RunConfig& cfg) {
  RunSettings s;
  s.unet.base_channels = cfg.base_channels;
  s.unet.depth = cfg.depth;
  s.unet.num_classes = cfg.num_classes;
  s.unet.tap_location = parse_tap(cfg.tap);
  s.attn.variant = parse_variant(cfg.variant);
  s.attn.position_budget = cfg.position_budget;
  s.epochs = cfg.epochs;
  s.batch_size = cfg.batch_size;
  s.lr = cfg.lr;
  s.detach_feedback = !cfg.no_detach;
  return s;
}

std::vector<LabeledTile> load_tiles(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic")
    return synth_generate(cfg.synth_count, cfg.synth_size, cfg.seed);
  return tile_dataset(cfg.dataset + "/images", cfg.dataset + "/labels", cfg.tile_size);
}

void split_counts(const RunConfig& cfg, int n_tiles, int& tr, int& va, int& te) {
  if (!cfg.split.empty()) {
    char c1, c2;
    std::istringstream ss(cfg.split);
    if (!(ss >> tr >> c1 >> va >> c2 >> te) || c1 != ',' || c2 != ',')
      throw UsageError("bad --split, expected 'train,val,test' counts");
  } else {
    tr = static_cast<int>(n_tiles * 0.60);
    va = static_cast<int>(n_tiles * 0.15);
    te = n_tiles - tr - va;
  }
}

void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
  std::ofstream out(dir + "/config.txt");
  out << "dataset=" << cfg.dataset << "\nvariant=" << cfg.variant << "\ntap=" << cfg.tap
      << "\nbase_channels=" << cfg.base_channels << "\ndepth=" << cfg.depth
      << "\nnum_classes=" << cfg.num_classes << "\nepochs=" << cfg.epochs
      << "\nbatch_size=" << cfg.batch_size << "\nlr=" << cfg.lr << "\nseed=" << cfg.seed
      << "\nseeds=" << cfg.seeds << "\nfolds=" << cfg.folds << "\nno_detach=" << cfg.no_detach
      << "\ntile_size=" << cfg.tile_size << "\nsynth_count=" << cfg.synth_count
      << "\nsynth_size=" << cfg.synth_size << "\nsplit=" << cfg.split
      << "\nposition_budget=" << cfg.position_budget << "\nout=" << cfg.out << "\n";
}

std::vector<std::uint64_t> seed_list(const RunConfig& cfg) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < cfg.seeds; ++i) seeds.push_back(cfg.seed + i);
  return seeds;
}

int cmd_train(const RunConfig& cfg) {
  auto tiles = load_tiles(cfg);
  int tr, va, te;
  split_counts(cfg, static_cast<int>(tiles.size()), tr, va, te);
  FoldAssignment folds =
      make_folds(static_cast<int>(tiles.size()), cfg.folds, cfg.seed, tr, va, te);
  fs::create_directories(cfg.out);
  write_resolved_config(cfg, cfg.out);
  save_index_csv(cfg.out + "/index.csv", build_records(tiles, folds));

  RunSettings settings = to_settings(cfg);
  std::vector<MetricsRecord> rows;
  for (int fold = 0; fold < folds.n_folds(); ++fold)
    for (std::uint64_t seed : seed_list(cfg)) {
      std::cerr << "[train] variant=" << cfg.variant << " fold=" << fold << " seed=" << seed
                << "\n";
      const std::string ckpt =
          cfg.out + "/checkpoint_f" + std::to_string(fold) + "_s" + std::to_string(seed);
      auto res = run_single<float>(tiles, folds.roles[fold], seed, settings, ckpt);
      for (MetricsRecord r : {res.test_first, res.test_second}) {
        r.variant = cfg.variant;
        r.fold = fold;
        rows.push_back(std::move(r));
      }
    }
  write_metrics_csv(cfg.out + "/metrics.csv", rows, cfg.num_classes);
  std::cout << "wrote " << cfg.out << "/metrics.csv (" << rows.size() << " rows)\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& variants_arg, bool tap_ablation) {
  auto tiles = load_tiles(cfg);
  int tr, va, te;
  split_counts(cfg, static_cast<int>(tiles.size()), tr, va, te);
  FoldAssignment folds =
      make_folds(static_cast<int>(tiles.size()), cfg.folds, cfg.seed, tr, va, te);
  fs::create_directories(cfg.out);
  write_resolved_config(cfg, cfg.out);

  std::vector<Variant> variants;
  std::istringstream ss(variants_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) variants.push_back(parse_variant(tok));
  std::vector<TapLocation> taps =
      tap_ablation ? std::vector<TapLocation>{TapLocation::AfterConv1, TapLocation::AfterConv2}
                   : std::vector<TapLocation>{parse_tap(cfg.tap)};

  auto rows = run_experiment<float>(tiles, folds, variants, taps, seed_list(cfg),
                                    to_settings(cfg), true);
  write_metrics_csv(cfg.out + "/ablation.csv", rows, cfg.num_classes);
  std::cout << "wrote " << cfg.out << "/ablation.csv (" << rows.size() << " rows)\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& role_str) {
  auto tiles = load_tiles(cfg);
  int tr, va, te;
  split_counts(cfg, static_cast<int>(tiles.size()), tr, va, te);
  FoldAssignment folds =
      make_folds(static_cast<int>(tiles.size()), cfg.folds, cfg.seed, tr, va, te);
  RunSettings settings = to_settings(cfg);

  UNet<float> unet(settings.unet, cfg.seed);
  Connector<float> conn(settings.attn, cfg.base_channels, cfg.seed + 0x9e3779b97f4a7c15ULL);
  ModelParams<float> all;
  all.merge(unet.params());
  all.merge(conn.params());
  load_checkpoint(all, checkpoint);

  const Role role = parse_role(role_str);
  std::vector<int> train_idx, eval_idx;
  for (size_t i = 0; i < tiles.size(); ++i) {
    if (folds.roles[0][i] == Role::Train) train_idx.push_back(static_cast<int>(i));
    if (folds.roles[0][i] == role) eval_idx.push_back(static_cast<int>(i));
  }
  Normalization norm = compute_normalization(tiles, train_idx);
  auto recs = evaluate(unet, conn, tiles, eval_idx, norm, cfg.batch_size,
                       settings.detach_feedback);
  for (const auto& r : recs) {
    std::cout << r.pass << " pass: mIoU " << r.mean_iou << " loss " << r.loss << " (";
    for (size_t c = 0; c < r.per_class_iou.size(); ++c)
      std::cout << (c ? " " : "") << "class" << c << "=" << r.per_class_iou[c];
    std::cout << ")\n";
  }
  return 0;
}

int cmd_export_attention(const RunConfig& cfg, const std::string& checkpoint,
                         const std::string& image_path,
                         const std::vector<std::string>& queries, double norm_mean,
                         double norm_std) {
  RunSettings settings = to_settings(cfg);
  if (settings.attn.variant != Variant::SourceTarget && settings.attn.variant != Variant::Self)
    throw UsageError("attention export requires variant st or self");

  UNet<float> unet(settings.unet, cfg.seed);
  Connector<float> conn(settings.attn, cfg.base_channels, cfg.seed + 0x9e3779b97f4a7c15ULL);
  ModelParams<float> all;
  all.merge(unet.params());
  all.merge(conn.params());
  load_checkpoint(all, checkpoint);

  GrayImage img = read_gray(image_path);
  Tensor<float> x({1, 1, img.height, img.width});
  for (size_t i = 0; i < img.pixels.size(); ++i)
    x.data()[i] = static_cast<float>((img.pixels[i] / 255.0 - norm_mean) / norm_std);

  auto out = two_pass_forward(unet, conn, x, Mode::Eval, settings.detach_feedback, true);
  if (!out.attn) throw NumericError("no attention map produced");
  fs::create_directories(cfg.out);
  for (const std::string& q : queries) {
    int qx, qy;
    char c;
    std::istringstream ss(q);
    if (!(ss >> qx >> c >> qy) || c != ',')
      throw UsageError("bad --query '" + q + "', expected 'x,y'");
    if (qx < 0 || qx >= img.width || qy < 0 || qy >= img.height)
      throw UsageError("query pixel (" + q + ") outside image");
    const int qidx = qy * img.width + qx;
    export_attention_row(*out.attn, 0, qidx,
                         cfg.out + "/attention_q" + std::to_string(qx) + "_" +
                             std::to_string(qy) + ".png");
  }
  export_prediction(out.second_logits, 0, cfg.out + "/prediction.png");
  std::cout << "wrote " << queries.size() << " attention map(s) and prediction to " << cfg.out
            << "\n";
  return 0;
}

int cmd_synth(const std::string& out_dir, int count, int size, std::uint64_t seed) {
  auto tiles = synth_generate(count, size, seed);
  fs::create_directories(out_dir + "/images");
  fs::create_directories(out_dir + "/labels");
  for (const auto& t : tiles) {
    GrayImage img, lbl;
    img.height = img.width = lbl.height = lbl.width = t.size;
    img.pixels.resize(t.image.size());
    lbl.pixels.resize(t.labels.size());
    for (size_t i = 0; i < t.image.size(); ++i)
      img.pixels[i] = static_cast<std::uint8_t>(std::clamp(t.image[i] * 255.0f, 0.0f, 255.0f));
    std::copy(t.labels.begin(), t.labels.end(), lbl.pixels.begin());
    write_gray(out_dir + "/images/" + t.image_id + ".png", img);
    write_gray(out_dir + "/labels/" + t.image_id + ".png", lbl);
  }
  std::cout << "wrote " << tiles.size() << " image/label pairs to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback-attention segmentation toolkit"};
  app.require_subcommand(1);

  RunConfig cfg;
  // --config is resolved before normal parsing so explicit flags override it.
  for (int i = 1; i < argc - 1; ++i)
    if (std::string(argv[i]) == "--config") {
      try {
        apply_config_file(argv[i + 1], cfg);
      } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
      }
    }
  std::string config_path;

  auto* train = app.add_subcommand("train", "train one variant over folds x seeds");
  add_common_options(train, cfg);
  train->add_option("--config", config_path, "key=value config file");

  std::string variants_arg = "add,conv1x1,se,light,st,self";
  bool tap_ablation = false;
  auto* ablate = app.add_subcommand("ablate", "run the connector/tap ablation matrix");
  add_common_options(ablate, cfg);
  ablate->add_option("--config", config_path);
  ablate->add_option("--variants", variants_arg, "comma-separated connector list");
  ablate->add_flag("--tap-ablation", tap_ablation, "run both tap locations");

  std::string checkpoint, role_str = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common_options(eval, cfg);
  eval->add_option("--config", config_path);
  eval->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
  eval->add_option("--role", role_str, "train | val | test");

  std::string image_path;
  std::vector<std::string> queries;
  double norm_mean = 0.5, norm_std = 0.25;
  auto* exp_attn = app.add_subcommand("export-attention", "dump attention rows for query pixels");
  add_common_options(exp_attn, cfg);
  exp_attn->add_option("--config", config_path);
  exp_attn->add_option("--checkpoint", checkpoint)->required();
  exp_attn->add_option("--image", image_path, "grayscale tile image")->required();
  exp_attn->add_option("--query", queries, "query pixel 'x,y' (repeatable)")->required();
  exp_attn->add_option("--norm-mean", norm_mean);
  exp_attn->add_option("--norm-std", norm_std);

  std::string synth_out = "synthetic_data";
  int synth_count = 20, synth_size = 256;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset to disk");
  synth->add_option("--out", synth_out);
  synth->add_option("--count", synth_count);
  synth->add_option("--size", synth_size);
  synth->add_option("--seed", synth_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(cfg);
    if (*ablate) return cmd_ablate(cfg, variants_arg, tap_ablation);
    if (*eval) return cmd_eval(cfg, checkpoint, role_str);
    if (*exp_attn)
      return cmd_export_attention(cfg, checkpoint, image_path, queries, norm_mean, norm_std);
    if (*synth) return cmd_synth(synth_out, synth_count, synth_size, synth_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
