#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tfma/tfma.hpp"

using namespace tfma;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

json config_json(const Globals& g) { return g.config.empty() ? json::object() : train::read_config_json(g.config); }

train::RunConfig run_config(const Globals& g) {
  train::RunConfig c = train::run_config_from_json(config_json(g));
  if (g.seed) c.seed = g.seed;
  if (!g.out.empty()) c.out_dir = g.out;
  return c;
}

std::string require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(g.out);
  return g.out;
}

void write_out(const std::string& dir, const std::string& name, const std::string& text) {
  const std::string path = (fs::path(dir) / name).string();
  write_file(path, text);
  std::cout << "wrote " << path << '\n';
}

/// Flow source used at training time: the run_config.json next to the
/// checkpoint if present, otherwise inferred from the input channel count.
train::FlowSource resolve_flow(const std::string& checkpoint, const Model& model, const std::string& requested) {
  if (requested != "auto") return train::flow_source_from_name(requested);
  const fs::path run = fs::path(checkpoint).parent_path() / "run_config.json";
  if (fs::exists(run)) return train::read_run_config(run.string()).flow;
  return model.config().backbone.input_channels == 3 ? train::FlowSource::none : train::FlowSource::estimated;
}

struct EvalInputs {
  std::string checkpoint;
  std::string dataset;
  std::string flow = "auto";
};

void add_eval_options(CLI::App* cmd, EvalInputs& in) {
  cmd->add_option("--checkpoint", in.checkpoint, "Checkpoint written by train")->required();
  cmd->add_option("--dataset", in.dataset, "Dataset root (defaults to the config's dataset)");
  cmd->add_option("--flow-source", in.flow, "auto, estimated, ground_truth or none");
}

struct Loaded {
  LoadedModel model;
  train::Dataset data;
};

Loaded load_for_eval(const EvalInputs& in, const train::RunConfig& cfg) {
  LoadedModel lm = load_model(in.checkpoint);
  const std::string root = in.dataset.empty() ? cfg.dataset : in.dataset;
  if (root.empty()) throw ConfigError("--dataset is required");
  train::Dataset d = train::load_dataset(root, resolve_flow(in.checkpoint, lm.model, in.flow), cfg.flow_config);
  if (d.channels() != lm.model.config().backbone.input_channels)
    throw DataError("dataset inputs do not match the checkpoint's input channels");
  return {std::move(lm), std::move(d)};
}

int run(int argc, char** argv) {
  CLI::App app{"Two-frame motion attention toolkit for long-tailed open-set recognition"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out", g.out, "Output directory");

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic dataset into --out");

  auto* trn = app.add_subcommand("train", "Two-stage training");
  std::string train_dataset, train_flow;
  bool baseline = false, paper_epochs = false, no_meta = false;
  std::optional<int> epochs1, epochs2;
  trn->add_option("--dataset", train_dataset, "Dataset root");
  trn->add_option("--flow-source", train_flow, "estimated, ground_truth or none");
  trn->add_flag("--baseline", baseline, "RGB-only backbone without masks or meta-embedding");
  trn->add_flag("--no-meta", no_meta, "Stop after the representation stage");
  trn->add_flag("--paper-epochs", paper_epochs, "90 representation epochs");
  trn->add_option("--stage1-epochs", epochs1);
  trn->add_option("--stage2-epochs", epochs2);

  auto* closed = app.add_subcommand("eval-closed", "Top-1 accuracy overall and by Many/Medium/Few");
  EvalInputs closed_in;
  add_eval_options(closed, closed_in);

  auto* open = app.add_subcommand("eval-open", "OpenMax AUROC on the imbalanced and balanced test sets");
  EvalInputs open_in;
  std::optional<std::size_t> tail_size, alpha;
  add_eval_options(open, open_in);
  open->add_option("--tail-size", tail_size, "Weibull tail size");
  open->add_option("--alpha", alpha, "Number of recalibrated top classes");

  auto* flw = app.add_subcommand("flow", "Estimate flow between two PPM frames");
  std::string frame_a, frame_b;
  double max_disp = 8.0;
  flw->add_option("frame_a", frame_a)->required()->check(CLI::ExistingFile);
  flw->add_option("frame_b", frame_b)->required()->check(CLI::ExistingFile);
  flw->add_option("--max-displacement", max_disp);

  auto* dump = app.add_subcommand("dump-embeddings", "Per-sample feature, meta-embedding and reachability");
  EvalInputs dump_in;
  add_eval_options(dump, dump_in);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) {
    const auto cfg = train::synth_config_from_json(config_json(g));
    const auto seed = run_config(g).require_seed();
    const auto m = synthdata::generate(cfg, seed, require_out(g), run_config(g).groups);
    std::cout << m.samples.size() << " samples, manifest " << synthdata::manifest_hash(m) << '\n';
  } else if (trn->parsed()) {
    train::RunConfig cfg = run_config(g);
    if (!train_dataset.empty()) cfg.dataset = train_dataset;
    if (!train_flow.empty()) cfg.flow = train::flow_source_from_name(train_flow);
    if (baseline) cfg = train::baseline_config(cfg);
    if (no_meta) cfg.meta_embedding = false;
    if (paper_epochs) cfg.stage1.epochs = 90;
    if (epochs1) cfg.stage1.epochs = *epochs1;
    if (epochs2) cfg.stage2.epochs = *epochs2;
    if (cfg.dataset.empty()) throw ConfigError("--dataset is required");
    require_out(g);
    cfg.validate();
    const auto data = train::load_dataset(cfg.dataset, cfg.flow, cfg.flow_config);
    const auto result = train::train(cfg, data, [](const train::EpochLog& e) {
      std::printf("stage %d epoch %d lr %.5f ce %.4f margin %.4f total %.4f\n", e.stage, e.epoch, e.lr, e.ce, e.margin,
                  e.total);
      std::fflush(stdout);
    });
    for (const auto& path : {result.stage1_checkpoint, result.stage2_checkpoint})
      if (!path.empty()) std::cout << path << ' ' << file_hash(path) << '\n';
  } else if (closed->parsed()) {
    const auto cfg = run_config(g);
    const std::string dir = require_out(g);
    auto in = load_for_eval(closed_in, cfg);
    const auto m = eval::evaluate_closed(in.model.model, in.data, cfg.groups);
    write_out(dir, "closed_metrics.json", eval::metrics_json(m, std::nullopt).dump(2) + "\n");
  } else if (open->parsed()) {
    auto cfg = run_config(g);
    if (tail_size) cfg.openmax.tail_size = *tail_size;
    if (alpha) cfg.openmax.alpha = *alpha;
    const std::string dir = require_out(g);
    auto in = load_for_eval(open_in, cfg);
    const auto r = eval::evaluate_open(in.model.model, in.data, cfg.openmax);
    for (const auto& w : r.metrics.warnings) std::cerr << "warning: " << w << '\n';
    write_out(dir, "open_metrics.json", eval::metrics_json(std::nullopt, r.metrics).dump(2) + "\n");
    write_out(dir, "roc_imbalanced.csv", eval::roc_csv(r.metrics.roc_imbalanced));
    write_out(dir, "roc_balanced.csv", eval::roc_csv(r.metrics.roc_balanced));
    write_out(dir, "openmax_stats.json", openset::to_json(r.stats).dump(2) + "\n");
  } else if (flw->parsed()) {
    flow::FlowConfig fc;
    fc.max_displacement = max_disp;
    const auto f = flow::estimate_flow(image_to_tensor(read_ppm(frame_a)), image_to_tensor(read_ppm(frame_b)), fc);
    const std::size_t h = f.dim(1), w = f.dim(2);
    std::string csv = "x,y,u,v\n";
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        csv += std::to_string(x) + ',' + std::to_string(y) + ',' + std::to_string(f[y * w + x]) + ',' +
               std::to_string(f[h * w + y * w + x]) + '\n';
    write_out(require_out(g), "flow.csv", csv);
  } else if (dump->parsed()) {
    const auto cfg = run_config(g);
    const std::string dir = require_out(g);
    auto in = load_for_eval(dump_in, cfg);
    write_out(dir, "embeddings.csv", eval::embeddings_csv(in.model.model, in.data));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
