// ccmr: train-toy, infer, eval, bench-attn, viz-context.
//
// Exit codes: 0 ok, 1 usage / configuration, 2 unreadable or inconsistent
// data, 3 numeric failure (non-finite loss or flow).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "ccmr/bench.hpp"
#include "ccmr/checkpoint.hpp"
#include "ccmr/evalio.hpp"
#include "ccmr/run_config.hpp"

namespace fs = std::filesystem;
using namespace ccmr;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

// Model from a checkpoint, or freshly initialised from a preset when no
// checkpoint is given.
std::unique_ptr<CcmrModel<float>> load_model(const std::string& checkpoint, const std::string& preset, int scales,
                                             std::uint64_t seed) {
  if (!checkpoint.empty()) {
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    auto model = std::make_unique<CcmrModel<float>>(ckpt.config, 0);
    restore(ckpt, *model);
    return model;
  }
  ModelConfig config;
  if (preset == "toy") {
    config = ModelConfig::toy();
  } else if (preset != "full") {
    throw ConfigError("--model must be toy or full");
  }
  if (scales > 0) config.num_scales = scales;
  return std::make_unique<CcmrModel<float>>(config, seed);
}

// ---------------------------------------------------------------- train-toy

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string checkpoint;
  std::string curve;
};

void write_curve(const std::string& path, const std::vector<TrainRecord>& curve, bool append) {
  const bool header = !append || !fs::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  if (header) out << "step,loss,lr,grad_norm,aepe\n";
  for (const auto& r : curve) {
    out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << ',';
    if (r.aepe >= 0.0) out << r.aepe;
    out << '\n';
  }
}

int run_train(const TrainArgs& args) {
  ToyRunConfig run = load_toy_run(args.config);
  if (!args.checkpoint.empty()) run.checkpoint = args.checkpoint;
  if (!args.curve.empty()) run.curve = args.curve;

  SyntheticOptions opts;
  opts.max_displacement = run.max_displacement;
  const auto data = generate_synthetic(run.samples, run.size, run.data_seed, opts);
  CcmrModel<float> model(run.model, run.model_seed);
  Adam<float> optimizer(model.parameters(), 0.9, 0.999, 1e-8, run.train.weight_decay);
  TrainState state;
  if (!args.resume.empty()) {
    const Checkpoint ckpt = read_checkpoint(args.resume);
    if (nlohmann::json(ckpt.config) != nlohmann::json(run.model)) {
      throw ConfigError(args.resume + ": checkpoint model differs from the config's model");
    }
    restore(ckpt, model, &optimizer);
    state.step = static_cast<int>(ckpt.step);
    std::printf("resumed from %s at step %d\n", args.resume.c_str(), state.step);
  }
  const nlohmann::json meta = {{"run", to_json(run)}};
  const auto start = std::chrono::steady_clock::now();
  train_toy(model, optimizer, data, run.train, state, [&](const TrainRecord& r) {
    if (r.aepe >= 0.0) {
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("step %5d  loss %.5f  lr %.2e  |g| %.3f  aepe %.4f  (%.0f s)\n", r.step, r.loss, r.lr, r.grad_norm,
                  r.aepe, t);
      std::fflush(stdout);
    }
    if (run.checkpoint_every > 0 && r.step % run.checkpoint_every == 0) {
      write_checkpoint(run.checkpoint, capture(model, r.step, &optimizer, meta));
    }
  });
  write_checkpoint(run.checkpoint, capture(model, state.step, &optimizer, meta));
  write_curve(run.curve, state.curve, !args.resume.empty());
  const double final_loss = state.curve.empty() ? 0.0 : state.curve.back().loss;
  std::printf("final step %d  loss %.6f  train aepe %.4f\n", state.step, final_loss,
              dataset_aepe(model, data, run.train.schedule));
  std::printf("checkpoint %s  curve %s\n", run.checkpoint.c_str(), run.curve.c_str());
  return 0;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint;
  std::string model = "toy";
  std::uint64_t seed = 1;
  std::string image1, image2;
  std::string preset = "train";
  int scales = 0;
  std::string iters;
  std::string out;
  std::string viz;
};

int run_infer(const InferArgs& args) {
  auto model = load_model(args.checkpoint, args.model, args.scales, args.seed);
  const int scales = model->config().num_scales;
  if (args.scales > 0 && args.scales != scales) {
    throw ConfigError("--scales " + std::to_string(args.scales) + " does not match the " + std::to_string(scales) +
                      "-scale checkpoint");
  }
  const IterationSchedule schedule =
      args.iters.empty() ? IterationSchedule::preset(args.preset, scales) : IterationSchedule::parse(args.iters);
  const Tensor<float> im1 = read_image(args.image1), im2 = read_image(args.image2);
  if (!im1.same_shape(im2)) throw ShapeError("images differ in size: " + im1.shape_string() + " vs " + im2.shape_string());
  Padding pad;
  const Var<float> a(pad_to_multiple(im1, 16, &pad)), b(pad_to_multiple(im2, 16));
  NoGradGuard no_grad;
  const auto est = estimate_flow(*model, a, b, schedule);
  const Tensor<float> flow = crop(est.flow.value(), im1.height(), im1.width());
  if (!flow.mat().allFinite()) throw NumericError("estimated flow is not finite");
  std::printf("schedule %s  gru invocations %d  size %dx%d (padded %d,%d)\n", schedule.to_string().c_str(),
              est.gru_invocations, im1.width(), im1.height(), pad.right, pad.bottom);
  if (!args.out.empty()) write_flo(args.out, flow);
  if (!args.viz.empty()) write_rgb(args.viz, flow_to_color(flow));
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred_dir, gt_dir, occ_dir, csv;
};

struct FlowFile {
  FlowField flow;
  Mask valid;
};

FlowFile load_flow(const fs::path& path) {
  if (path.extension() == ".flo") return {read_flo(path.string()), {}};
  KittiFlow k = read_kitti_png(path.string());
  return {std::move(k.flow), std::move(k.valid)};
}

Mask load_mask(const fs::path& path, int height, int width) {
  const Tensor<float> img = read_image(path.string());
  if (img.height() != height || img.width() != width) throw ShapeError(path.string() + ": mask size mismatch");
  Mask m(1, height, width);
  for (int p = 0; p < img.pixels(); ++p) m.mat()(0, p) = img.mat()(0, p) > -1.0f ? 1.0f : 0.0f;
  return m;
}

std::map<std::string, fs::path> index_dir(const std::string& dir, bool flows) {
  if (!fs::is_directory(dir)) throw FormatError(dir + ": not a directory");
  std::map<std::string, fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (ext == ".png" || (flows && ext == ".flo")) files[entry.path().stem().string()] = entry.path();
  }
  return files;
}

int run_eval(const EvalArgs& args) {
  const auto preds = index_dir(args.pred_dir, true);
  const auto gts = index_dir(args.gt_dir, true);
  const auto masks = args.occ_dir.empty() ? std::map<std::string, fs::path>{} : index_dir(args.occ_dir, false);
  std::ostringstream table;
  table << "name,pixels,aepe_all,aepe_matched,aepe_unmatched,fl_all,fl_noc,n_matched,n_unmatched\n";
  const auto row = [&table](const std::string& name, const EvalResult& r) {
    table << name << ',' << r.n_all << ',' << r.aepe_all << ',' << r.aepe_matched << ',';
    if (r.has_regions) {
      table << r.aepe_unmatched;
    } else {
      table << "absent";
    }
    table << ',' << r.fl_all << ',' << r.fl_noc << ',' << r.n_matched << ',';
    if (r.has_regions) {
      table << r.n_unmatched;
    } else {
      table << "absent";
    }
    table << '\n';
  };
  // Pixel-weighted totals across files.
  EvalResult total;
  total.has_regions = true;
  double epe_all = 0, epe_m = 0, epe_u = 0, fl_all = 0, fl_m = 0;
  int evaluated = 0;
  for (const auto& [stem, pred_path] : preds) {
    const auto gt_it = gts.find(stem);
    if (gt_it == gts.end()) {
      std::fprintf(stderr, "warning: no ground truth for %s, skipped\n", stem.c_str());
      continue;
    }
    const FlowFile pred = load_flow(pred_path);
    const FlowFile gt = load_flow(gt_it->second);
    if (!pred.flow.same_shape(gt.flow)) {
      throw ShapeError(stem + ": prediction " + pred.flow.shape_string() + " vs ground truth " + gt.flow.shape_string());
    }
    const auto mask_it = masks.find(stem);
    const Mask occ =
        mask_it == masks.end() ? Mask{} : load_mask(mask_it->second, gt.flow.height(), gt.flow.width());
    const EvalResult r = evaluate(pred.flow, gt.flow, gt.valid, occ);
    row(stem, r);
    ++evaluated;
    total.n_all += r.n_all;
    epe_all += r.aepe_all * r.n_all;
    fl_all += r.fl_all * r.n_all;
    if (r.has_regions) {
      total.n_matched += r.n_matched;
      total.n_unmatched += r.n_unmatched;
      epe_m += r.aepe_matched * r.n_matched;
      epe_u += r.aepe_unmatched * r.n_unmatched;
      fl_m += r.fl_noc * r.n_matched;
    } else {
      total.has_regions = false;
    }
  }
  if (evaluated == 0) throw FormatError("no prediction / ground-truth pairs found");
  const auto safe = [](double s, std::int64_t n) { return n ? s / n : 0.0; };
  total.aepe_all = safe(epe_all, total.n_all);
  total.fl_all = safe(fl_all, total.n_all);
  if (total.has_regions) {
    total.aepe_matched = safe(epe_m, total.n_matched);
    total.aepe_unmatched = safe(epe_u, total.n_unmatched);
    total.fl_noc = safe(fl_m, total.n_matched);
  } else {
    total.aepe_matched = total.aepe_all;
    total.fl_noc = total.fl_all;
    total.n_matched = total.n_all;
  }
  row("ALL", total);
  std::cout << table.str();
  if (!args.csv.empty()) {
    std::ofstream out(args.csv);
    if (!out) throw FormatError(args.csv + ": cannot open for writing");
    out << table.str();
  }
  return 0;
}

// ---------------------------------------------------------------- bench-attn

struct BenchArgs {
  std::string mechanisms = "token,xca";
  std::string sizes = "32,64,96,128,160,192,224,256";
  int dim = 256;
  int heads = 8;
  int token_heads = 1;
  double budget_mb = 2048;
  std::string csv = "attention_footprint.csv";
  std::string plot = "attention_footprint.png";
};

int run_bench(const BenchArgs& args) {
  BenchConfig config;
  config.sides = parse_int_list(args.sizes, "--sizes");
  config.dim = args.dim;
  config.xca_heads = args.heads;
  config.token_heads = args.token_heads;
  config.budget_bytes = static_cast<std::int64_t>(args.budget_mb * 1024 * 1024);
  std::vector<FootprintReport> reports;
  std::stringstream ss(args.mechanisms);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const Mechanism m = parse_mechanism(name);
    FootprintReport r = footprint_empirical(m, config);
    std::printf("%s (d=%d, h=%d)\n", to_string(m).c_str(), r.dim, r.heads);
    for (const auto& p : r.points) {
      std::printf("  %4d^2  N=%-6lld  elements %-12lld peak %.2f MiB  %.2f s\n", p.side,
                  static_cast<long long>(p.tokens), static_cast<long long>(p.attention_elements),
                  p.peak_bytes / 1048576.0, p.seconds);
    }
    for (int side : r.skipped_sides) std::printf("  %4d^2  over the %.0f MiB budget, skipped\n", side, args.budget_mb);
    std::printf("  log-log slope %.3f over %zu sizes\n", r.slope, r.points.size());
    reports.push_back(std::move(r));
  }
  write_report_csv(args.csv, reports);
  write_report_plot(args.plot, reports);
  return 0;
}

// ---------------------------------------------------------------- viz-context

struct VizArgs {
  std::string checkpoint;
  std::string model = "toy";
  std::uint64_t seed = 1;
  std::string image;
  int scale = 0;
  std::string channels;
  std::string out_dir = ".";
};

Tensor<float> normalized(const Tensor<float>& map) {
  Tensor<float> out = map;
  const float lo = out.mat().minCoeff(), hi = out.mat().maxCoeff();
  if (hi > lo) {
    out.mat() = (out.mat().array() - lo) / (hi - lo);
  } else {
    out.mat().setZero();
  }
  return out;
}

Tensor<float> channel_norm(const Tensor<float>& x) {
  Tensor<float> out(1, x.height(), x.width());
  out.mat() = x.mat().colwise().norm();
  return out;
}

int run_viz(const VizArgs& args) {
  auto model = load_model(args.checkpoint, args.model, 0, args.seed);
  const ModelConfig& cfg = model->config();
  if (args.scale < 0 || args.scale >= cfg.num_scales) {
    throw ConfigError("--scale must lie in [0, " + std::to_string(cfg.num_scales) + ")");
  }
  std::vector<int> channels;
  if (!args.channels.empty()) channels = parse_int_list(args.channels, "--channels");
  for (int c : channels) {
    if (c < 0 || c >= cfg.context_dim) {
      throw ConfigError("--channels: " + std::to_string(c) + " outside [0, " + std::to_string(cfg.context_dim) + ")");
    }
  }
  const Tensor<float> image = read_image(args.image);
  NoGradGuard no_grad;
  const auto ctx = compute_context(*model, Var<float>(pad_to_multiple(image, 16)));
  const Tensor<float>& context = ctx.context.levels[args.scale].context.value();
  const Tensor<float>& global = ctx.global_context[args.scale].value();
  fs::create_directories(args.out_dir);
  const auto save = [&](const std::string& name, const Tensor<float>& map) {
    const fs::path path = fs::path(args.out_dir) / (name + ".png");
    write_png(path.string(), heatmap(normalized(map)));
    std::printf("%s\n", path.string().c_str());
  };
  const std::string tag = "s" + std::to_string(args.scale);
  save("context_" + tag, channel_norm(context));
  save("global_context_" + tag, channel_norm(global));
  for (int c : channels) {
    save("context_" + tag + "_c" + std::to_string(c), channel_norm(slice_channels(Var<float>(context), c, 1).value()));
    save("global_context_" + tag + "_c" + std::to_string(c),
         channel_norm(slice_channels(Var<float>(global), c, 1).value()));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine optical flow with cross-covariance motion aggregation"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train-toy", "Train on the synthetic toy set; writes a checkpoint and loss CSV");
  train_cmd->add_option("config", train.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", train.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint", train.checkpoint, "Override output.checkpoint");
  train_cmd->add_option("--curve", train.curve, "Override output.curve");

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Estimate flow between two PNG frames");
  infer_cmd->add_option("image1", infer.image1)->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("image2", infer.image2)->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Trained weights")->check(CLI::ExistingFile);
  infer_cmd->add_option("--model", infer.model, "Random-init preset when no checkpoint is given (toy, full)");
  infer_cmd->add_option("--seed", infer.seed, "Initialisation seed without a checkpoint");
  infer_cmd->add_option("--preset", infer.preset, "Iteration preset")->check(CLI::IsMember({"train", "sintel", "kitti"}));
  infer_cmd->add_option("--scales", infer.scales, "Number of scales (3 or 4)");
  infer_cmd->add_option("--iters", infer.iters, "Per-scale GRU iterations, coarse to fine, e.g. 4,5,5,6");
  infer_cmd->add_option("--out", infer.out, "Write the flow as .flo");
  infer_cmd->add_option("--viz", infer.viz, "Write a color-coded flow image (.png or .ppm)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "AEPE / Fl of predicted flows against ground truth");
  eval_cmd->add_option("pred_dir", eval.pred_dir)->required();
  eval_cmd->add_option("gt_dir", eval.gt_dir)->required();
  eval_cmd->add_option("--occ-masks", eval.occ_dir, "Occlusion PNGs (nonzero = unmatched), same file stems");
  eval_cmd->add_option("--csv", eval.csv, "Also write the table here");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench-attn", "Attention memory footprint against token count");
  bench_cmd->add_option("--mechanisms", bench.mechanisms, "Comma list of token, xca");
  bench_cmd->add_option("--sizes", bench.sizes, "Square grid sides");
  bench_cmd->add_option("--dim", bench.dim, "Channel width d");
  bench_cmd->add_option("--heads", bench.heads, "XCA heads");
  bench_cmd->add_option("--token-heads", bench.token_heads, "Token attention heads");
  bench_cmd->add_option("--budget-mb", bench.budget_mb, "Memory budget per evaluation; larger sizes are skipped");
  bench_cmd->add_option("--csv", bench.csv);
  bench_cmd->add_option("--plot", bench.plot, "Log-log plot (.png or .ppm)");

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("viz-context", "Heat maps of context and global-context feature norms");
  viz_cmd->add_option("image", viz.image)->required()->check(CLI::ExistingFile);
  viz_cmd->add_option("--checkpoint", viz.checkpoint)->check(CLI::ExistingFile);
  viz_cmd->add_option("--model", viz.model, "Random-init preset when no checkpoint is given (toy, full)");
  viz_cmd->add_option("--seed", viz.seed);
  viz_cmd->add_option("--scale", viz.scale, "Scale index, 0 = coarsest");
  viz_cmd->add_option("--channels", viz.channels, "Also render these single channels");
  viz_cmd->add_option("--out-dir", viz.out_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return run_train(train);
    if (*infer_cmd) return run_infer(infer);
    if (*eval_cmd) return run_eval(eval);
    if (*bench_cmd) return run_bench(bench);
    if (*viz_cmd) return run_viz(viz);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
