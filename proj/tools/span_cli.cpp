// span: training, inference, evaluation, gradient checking and benchmarking
// for the SPAN super-resolution network.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spansr/spansr.hpp"

namespace fs = std::filesystem;
using namespace spansr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void apply_threading(bool deterministic, int threads) {
  set_thread_count(deterministic ? 1 : threads);
}

// Total FLOPs of one forward pass at h x w input, counting a multiply-add as
// 2 FLOPs per conv tap (2 * out_elems * in_c * k^2, summed over convolutions).
double flop_estimate(const SpanModel<float>& m, index_t h, index_t w) {
  const double plane = static_cast<double>(h * w);
  double flops = 0.0;
  auto conv_flops = [&](const ConvKernel<float>& k) {
    flops += 2.0 * plane * static_cast<double>(k.out_c() * k.in_c() * k.k() * k.k());
  };
  conv_flops(m.conv_first);
  for (const auto& blk : m.blocks) {
    for (const auto& conv : blk) {
      conv_flops(conv.main3x3);
      if (conv.side1x1) conv_flops(*conv.side1x1);
    }
  }
  conv_flops(m.conv_cat);
  conv_flops(m.conv_out);
  return flops;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path, std::optional<std::uint64_t> seed,
              const std::string& resume_path, const std::string& log_path,
              index_t stop_after) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.train.seed = *seed;
  if (!fs::is_directory(data_path)) {
    throw ImageIoError("dataset path not found: " + data_path);
  }
  DatasetSpec spec;
  spec.root = data_path;
  std::vector<Tensor4<float>> dataset = load_hr_images<float>(spec);

  SpanModel<float> model;
  AdamState<float> state;
  int start_stage = 0;
  index_t start_iteration = 0;
  if (!resume_path.empty()) {
    Checkpoint<float> ckpt = load_checkpoint<float>(resume_path);
    model = std::move(ckpt.model);
    state = std::move(ckpt.adam);
    start_stage = ckpt.stage;
    start_iteration = ckpt.iteration;
  } else {
    model = init_model<float>(cfg.model, cfg.train.seed);
    state = AdamState<float>::like(parameters(model));
  }

  const std::string csv = log_path.empty() ? out_path + ".csv" : log_path;
  std::ofstream log(csv, resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw ImageIoError("cannot open log file " + csv);
  if (resume_path.empty()) log << "iteration,loss,lr,wallclock_ms\n";

  TrainConfig run_cfg = cfg.train;
  const bool partial = stop_after > 0 && stop_after < cfg.train.iterations;
  if (partial) {
    run_cfg.iterations = stop_after;
    run_cfg.stages = start_stage + 1;  // stop inside the current stage
  }

  TrainObserver<float> observer = [&log](const TrainLogEntry& e, const SpanModel<float>&) {
    log << e.iteration << "," << e.loss << "," << e.lr << "," << e.wallclock_ms << "\n";
    log.flush();
  };

  try {
    train(model, dataset, run_cfg, observer, &state, start_stage, start_iteration);
  } catch (const std::runtime_error& e) {
    throw NumericError(e.what());
  }

  if (partial) {
    Checkpoint<float> ckpt{model, std::move(state), start_stage, stop_after};
    save_checkpoint(ckpt, out_path);
    std::cout << "checkpoint at iteration " << stop_after << " written to " << out_path << "\n";
  } else {
    save_weights(model, out_path);
    std::cout << "trained " << cfg.train.iterations << " iterations x " << cfg.train.stages
              << " stage(s); weights written to " << out_path << "\n";
  }
  std::cout << "log: " << csv << "\n";
  return kExitOk;
}

// ---- infer -----------------------------------------------------------------

int cmd_infer(const std::string& weights_path, const std::string& input_path,
              const std::string& out_dir, bool fuse) {
  SpanModel<float> model = load_weights<float>(weights_path);
  if (fuse) {
    if (model.fused) {
      std::cout << "weights already fused; --fuse is a no-op\n";
    } else {
      model = fuse_model(model);
    }
  }
  std::vector<fs::path> inputs;
  if (fs::is_directory(input_path)) {
    for (const auto& e : fs::directory_iterator(input_path)) {
      if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw ImageIoError("no .png files in " + input_path);
  } else if (fs::is_regular_file(input_path)) {
    inputs.push_back(input_path);
  } else {
    throw ImageIoError("input path not found: " + input_path);
  }
  fs::create_directories(out_dir);
  for (const auto& in : inputs) {
    Tensor4<float> lr = load_png<float>(in.string());
    Tensor4<float> sr = clamp01(span_forward(lr, model, RunMode::kInfer).output);
    const fs::path out = fs::path(out_dir) / in.filename();
    save_png(sr, out.string());
    std::cout << in.filename().string() << ": " << lr.w() << "x" << lr.h() << " -> " << sr.w()
              << "x" << sr.h() << " (" << out.string() << ")\n";
  }
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& weights_path, const std::string& data_path,
             const std::string& report_path) {
  SpanModel<float> model = load_weights<float>(weights_path);
  DatasetSpec spec;
  spec.root = data_path;
  std::vector<EvalPair<float>> pairs = load_eval_pairs<float>(spec, model.cfg.scale);
  EvalReport report = evaluate(model, pairs, model.cfg.scale);
  if (report.images.empty()) throw ImageIoError("no evaluable image pairs in " + data_path);

  std::ofstream out(report_path, std::ios::trunc);
  if (!out) throw ImageIoError("cannot open report file " + report_path);
  out << "image,psnr_db,ssim,bicubic_psnr_db,bicubic_ssim,wallclock_ms\n";
  for (const auto& s : report.images) {
    out << s.name << "," << s.psnr_db << "," << s.ssim_val << "," << s.bicubic_psnr_db << ","
        << s.bicubic_ssim << "," << s.wallclock_ms << "\n";
  }
  out << "mean," << report.mean_psnr << "," << report.mean_ssim << ","
      << report.mean_bicubic_psnr << "," << report.mean_bicubic_ssim << ",\n";

  std::cout << "images: " << report.images.size() << " border: " << report.border << " px\n";
  std::printf("model   PSNR %.4f dB  SSIM %.6f\n", report.mean_psnr, report.mean_ssim);
  std::printf("bicubic PSNR %.4f dB  SSIM %.6f\n", report.mean_bicubic_psnr,
              report.mean_bicubic_ssim);
  std::cout << "report: " << report_path << "\n";
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int precision, bool corrupt) {
  if (precision != 64) {
    throw UsageError("--precision must be 64 (finite differences need double precision)");
  }
  const auto results = gradcheck::run_suite(seed, corrupt);
  bool ok = true;
  std::printf("%-28s %14s %10s  %s\n", "op", "max rel err", "tol", "status");
  for (const auto& r : results) {
    const bool pass = r.passed();
    ok = ok && pass;
    std::printf("%-28s %14.3e %10.0e  %s\n", r.op.c_str(), r.max_rel_err, r.tolerance,
                pass ? "ok" : "FAIL");
  }
  if (!ok) {
    std::cout << "gradient check failed\n";
    return kExitNumeric;
  }
  std::cout << "all gradient checks passed\n";
  return kExitOk;
}

// ---- bench -----------------------------------------------------------------

int cmd_bench(const std::string& weights_path, const std::string& size, int runs, int warmup) {
  const auto sep = size.find('x');
  if (sep == std::string::npos) throw UsageError("--size must be HxW, e.g. 256x256");
  index_t h = 0, w = 0;
  try {
    h = std::stoll(size.substr(0, sep));
    w = std::stoll(size.substr(sep + 1));
  } catch (const std::exception&) {
    throw UsageError("--size must be HxW with integer dimensions");
  }
  if (h < 1 || w < 1 || runs < 1 || warmup < 0) {
    throw UsageError("--size, --runs and --warmup must be positive");
  }
  SpanModel<float> model = load_weights<float>(weights_path);
  Tensor4<float> input =
      fill_random<float>(Shape4{1, model.cfg.img_channels, h, w}, 7, UniformDist{0.0, 1.0});

  for (int i = 0; i < warmup; ++i) span_forward(input, model, RunMode::kInfer);
  std::vector<double> ms(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    span_forward(input, model, RunMode::kInfer);
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= runs;
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  const double stddev = runs > 1 ? std::sqrt(var / (runs - 1)) : 0.0;

  std::printf("input %lldx%lld, %d runs after %d warm-up\n", static_cast<long long>(h),
              static_cast<long long>(w), runs, warmup);
  std::printf("forward: mean %.2f ms, stddev %.2f ms\n", mean, stddev);
  std::printf("parameters: %lld (%s)\n", static_cast<long long>(parameter_count(model)),
              model.fused ? "fused" : "unfused");
  std::printf("FLOPs: %.3f G (multiply-add counted as 2)\n", flop_estimate(model, h, w) / 1e9);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SPAN super-resolution: train, infer, eval, gradcheck, bench"};
  app.require_subcommand(1);

  bool deterministic = false;
  int threads = 1;
  app.add_flag("--deterministic", deterministic, "serial accumulation order, single thread");
  app.add_option("--threads", threads, "intra-op worker threads")->default_val(1);

  // train
  std::string tr_config, tr_data, tr_out, tr_resume, tr_log;
  std::optional<std::uint64_t> tr_seed;
  index_t tr_stop_after = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model on a directory of HR PNGs");
  train_cmd->add_option("--config", tr_config, "JSON run configuration")->required();
  train_cmd->add_option("--data", tr_data, "dataset root (expects <root>/HR/*.png)")->required();
  train_cmd->add_option("--out", tr_out, "output weight (or checkpoint) file")->required();
  train_cmd->add_option("--seed", tr_seed, "override the config seed");
  train_cmd->add_option("--resume", tr_resume, "resume from a checkpoint file");
  train_cmd->add_option("--log", tr_log, "CSV log path (default: <out>.csv)");
  train_cmd->add_option("--stop-after", tr_stop_after,
                        "stop after this absolute iteration and write a checkpoint");

  // infer
  std::string in_weights, in_input, in_out;
  bool in_fuse = false;
  auto* infer_cmd = app.add_subcommand("infer", "upscale PNG images");
  infer_cmd->add_option("--weights", in_weights, "weight file")->required();
  infer_cmd->add_option("--input", in_input, "input PNG or directory")->required();
  infer_cmd->add_option("--out", in_out, "output directory")->required();
  infer_cmd->add_flag("--fuse", in_fuse, "fuse rep branches before running");

  // eval
  std::string ev_weights, ev_data, ev_report;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM evaluation with bicubic baseline");
  eval_cmd->add_option("--weights", ev_weights, "weight file")->required();
  eval_cmd->add_option("--data", ev_data, "dataset root")->required();
  eval_cmd->add_option("--report", ev_report, "CSV report path")->required();

  // gradcheck
  std::uint64_t gc_seed = 1;
  int gc_precision = 64;
  bool gc_corrupt = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc_cmd->add_option("--seed", gc_seed, "RNG seed")->default_val(1);
  gc_cmd->add_option("--precision", gc_precision, "floating-point precision")->default_val(64);
  gc_cmd->add_flag("--corrupt-backward", gc_corrupt,
                   "negative control: corrupt one gradient before checking")
      ->group("");  // hidden

  // bench
  std::string bn_weights, bn_size = "256x256";
  int bn_runs = 5, bn_warmup = 1;
  auto* bench_cmd = app.add_subcommand("bench", "forward-pass timing and FLOP estimate");
  bench_cmd->add_option("--weights", bn_weights, "weight file")->required();
  bench_cmd->add_option("--size", bn_size, "input size HxW")->default_val("256x256");
  bench_cmd->add_option("--runs", bn_runs, "timed runs")->default_val(5);
  bench_cmd->add_option("--warmup", bn_warmup, "warm-up runs")->default_val(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  apply_threading(deterministic, threads);
  try {
    if (*train_cmd) {
      return cmd_train(tr_config, tr_data, tr_out, tr_seed, tr_resume, tr_log, tr_stop_after);
    }
    if (*infer_cmd) return cmd_infer(in_weights, in_input, in_out, in_fuse);
    if (*eval_cmd) return cmd_eval(ev_weights, ev_data, ev_report);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_precision, gc_corrupt);
    if (*bench_cmd) return cmd_bench(bn_weights, bn_size, bn_runs, bn_warmup);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitData;
  } catch (const ImageIoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const WeightError& e) {
    std::cerr << "weight file error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
