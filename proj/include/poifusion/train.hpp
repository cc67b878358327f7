#pragma once

// Training loop: AdamW over scenes with set-prediction loss, per-step CSV log,
// best/final checkpoints, abort with a last-good checkpoint on numeric failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/assign.hpp"
#include "poifusion/checkpoint.hpp"
#include "poifusion/config.hpp"
#include "poifusion/decoder.hpp"
#include "poifusion/features.hpp"
#include "poifusion/random.hpp"
#include "poifusion/scene.hpp"

namespace poifusion {

/// Calls f(i) for i in [0, n) using up to `workers` threads at a time. Work
/// items must be independent; callers reduce results in index order.
template <class F>
void parallel_chunks(std::size_t n, int workers, F&& f) {
  const std::size_t w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  for (std::size_t begin = 0; begin < n; begin += w) {
    const std::size_t end = std::min(n, begin + w);
    std::vector<std::exception_ptr> errors(end - begin);
    std::vector<std::thread> threads;
    for (std::size_t i = begin; i < end; ++i)
      threads.emplace_back([&, i] {
        try {
          f(i);
        } catch (...) {
          errors[i - begin] = std::current_exception();
        }
      });
    for (std::thread& t : threads) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
}

inline DecoderParams init_model(const RunConfig& rc) {
  ModelConfig mc = rc.model;
  mc.init_seed = hash_combine(rc.seed, 0x1417);
  return init_decoder(mc, rc.scene.grid);
}

inline std::string checkpoint_meta(const RunConfig& rc) {
  return nlohmann::json{{"config", run_config_to_json(rc)}, {"config_hash", config_hash(rc)}}.dump();
}

/// Rebuilds the model a checkpoint was trained with. The embedded config
/// wins over anything passed on the command line.
inline std::pair<RunConfig, DecoderParams> load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  RunConfig rc;
  try {
    rc = run_config_from_json(nlohmann::json::parse(ck.meta).at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint metadata is malformed: " + std::string(e.what()));
  }
  DecoderParams params = init_model(rc);
  ParameterList list = params.parameters();
  restore_parameters(ck, list);
  return {rc, params};
}

struct SceneLoss {
  double total = 0.0, cls = 0.0, reg = 0.0;
};

/// Forward + backward of one scene; gradients accumulate into `params`.
inline SceneLoss scene_gradient(const DecoderParams& params, const Scene& scene, const RunConfig& rc,
                                std::uint64_t view_seed) {
  const FeatureAtlas atlas = encode_oracle_features(scene, rc.features);
  Tape tape;
  const auto outs = decode(tape, params, atlas, scene.rig, scene.grid, {0, view_seed});
  const LossBreakdown lb = set_prediction_loss(tape, outs, scene.boxes, rc.loss);
  tape.backward(lb.total);
  return {lb.total.item(), lb.cls, lb.reg};
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double total = 0.0, cls = 0.0, reg = 0.0, lr = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::ostream* progress = nullptr;
};

struct TrainResult {
  DecoderParams params;
  std::vector<StepRecord> log;
  std::vector<double> epoch_loss;
  int best_epoch = -1;  // -1: initialization
};

inline constexpr const char* kTrainLogName = "train_log.csv";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kLastGoodCheckpoint = "last_good.ckpt";

/// Deterministic per-epoch scene order (Fisher–Yates on the run's stream).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(hash_combine(hash_combine(seed, 0x5eed), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

inline TrainResult train(const RunConfig& rc, const std::vector<Scene>& scenes, const TrainOptions& opts = {}) {
  rc.validate();
  if (scenes.empty() && rc.optim.epochs > 0) throw std::invalid_argument("no scenes");
  TrainResult res{init_model(rc), {}, {}, -1};
  DecoderParams& params = res.params;
  ParameterList plist = params.parameters();
  AdamW opt(rc.optim.adamw);
  const std::string meta = checkpoint_meta(rc);
  const bool write = !opts.out_dir.empty();
  std::ofstream csv;
  if (write) {
    std::filesystem::create_directories(opts.out_dir);
    csv.open(opts.out_dir / kTrainLogName);
    if (!csv) throw std::runtime_error("cannot write " + (opts.out_dir / kTrainLogName).string());
    csv << "step,epoch,total,cls,reg,lr\n" << std::setprecision(17);
    save_checkpoint((opts.out_dir / kBestCheckpoint).string(), plist, meta);
  }

  const std::size_t batch = static_cast<std::size_t>(rc.optim.batch);
  const long steps_per_epoch = static_cast<long>((scenes.size() + batch - 1) / batch);
  const long total_steps = steps_per_epoch * rc.optim.epochs;
  double best = std::numeric_limits<double>::infinity();
  long step = 0;
  try {
    for (int epoch = 0; epoch < rc.optim.epochs; ++epoch) {
      const auto order = epoch_order(scenes.size(), rc.seed, epoch);
      double epoch_sum = 0.0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
        const std::size_t nb = std::min(batch, order.size() - b0);
        std::vector<DecoderParams> views;
        for (std::size_t i = 0; i < nb; ++i) views.push_back(params.worker_view());
        std::vector<SceneLoss> losses(nb);
        parallel_chunks(nb, rc.optim.workers, [&](std::size_t i) {
          const std::size_t s = order[b0 + i];
          const std::uint64_t view_seed = hash_combine(hash_combine(rc.seed, static_cast<std::uint64_t>(epoch)), s);
          losses[i] = scene_gradient(views[i], scenes[s], rc, view_seed);
        });
        // Ordered reduction: identical results for any worker count.
        params.zero_grad();
        const ParameterList master = params.parameters();
        StepRecord rec{step, epoch, 0, 0, 0, 0};
        for (std::size_t i = 0; i < nb; ++i) {
          const ParameterList wl = views[i].parameters();
          for (std::size_t k = 0; k < master.size(); ++k) {
            auto dst = master[k].tensor.grad();
            auto src = wl[k].tensor.grad();
            for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
          }
          rec.total += losses[i].total;
          rec.cls += losses[i].cls;
          rec.reg += losses[i].reg;
        }
        views.clear();
        const double inv = 1.0 / static_cast<double>(nb);
        for (const NamedTensor& p : master)
          for (double& g : p.tensor.grad()) g *= inv;
        rec.total *= inv, rec.cls *= inv, rec.reg *= inv;
        rec.lr = rc.optim.one_cycle ? one_cycle_lr(step, total_steps, rc.optim.adamw.lr) : rc.optim.adamw.lr;
        opt.step(plist, rec.lr);
        if (csv.is_open())
          csv << rec.step << ',' << rec.epoch << ',' << rec.total << ',' << rec.cls << ',' << rec.reg << ',' << rec.lr
              << '\n';
        res.log.push_back(rec);
        epoch_sum += rec.total * static_cast<double>(nb);
        ++step;
      }
      const double mean = epoch_sum / static_cast<double>(scenes.size());
      res.epoch_loss.push_back(mean);
      if (opts.progress)
        *opts.progress << "epoch " << epoch + 1 << "/" << rc.optim.epochs << " mean loss " << mean << std::endl;
      if (mean < best) {
        best = mean;
        res.best_epoch = epoch;
        if (write) save_checkpoint((opts.out_dir / kBestCheckpoint).string(), plist, meta);
      }
      csv.flush();
    }
  } catch (const NumericError&) {
    // Parameters still hold the last successful update.
    if (write) save_checkpoint((opts.out_dir / kLastGoodCheckpoint).string(), plist, meta);
    throw;
  }
  params.zero_grad();
  if (write) save_checkpoint((opts.out_dir / kFinalCheckpoint).string(), plist, meta);
  return res;
}

}  // namespace poifusion
