#pragma once

// Finite-difference check of the full decoder loss against reverse-mode
// gradients, per parameter block, on a tiny configuration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/assign.hpp"
#include "poifusion/config.hpp"
#include "poifusion/decoder.hpp"
#include "poifusion/features.hpp"
#include "poifusion/random.hpp"
#include "poifusion/train.hpp"

namespace poifusion {

inline constexpr const char* kGradcheckSchema = "poifusion.gradcheck/1";

/// 2 queries, 2 groups, 16 channels, 2 iterations, one camera, 8×8 BEV map
/// and 8×8 finest image level.
inline RunConfig tiny_config() {
  RunConfig rc;
  rc.scene.grid = BevGrid{-2.4, -2.4, 2.4, 2.4, 0.075, 0.075, 8};
  rc.scene.classes = {{"small", 0.8, 1.2, 1.0}, {"tall", 0.5, 0.5, 1.5}};
  rc.scene.min_boxes = 1;
  rc.scene.max_boxes = 2;
  rc.scene.ground_z = -0.5;
  rc.scene.rig = RigConfig{1, 0.0, 90.0, 32, 32, 0.0};
  rc.features.inner_radius = 1.0;
  rc.features.outer_radius = 2.0;
  rc.features.image_radius = 1.0;
  rc.model.num_queries = 2;
  rc.model.groups = 2;
  rc.model.channels = 16;
  rc.model.iterations = 2;
  rc.model.heads = 2;
  rc.model.ffn_hidden = 32;
  rc.model.view_selection = ViewSelection::lowest_index;
  rc.resolve();
  rc.validate();
  return rc;
}

struct GradcheckOptions {
  double step = 1e-5;        // central-difference h
  double tolerance = 1e-3;   // worst relative error allowed per block
  double abs_floor = 1e-6;   // denominator floor for near-zero gradients
  int entries_per_block = 24;
  /// The initial query lattice puts box centers exactly on integer BEV cell
  /// coordinates, where bilinear sampling has a kink and central differences
  /// straddle two slopes. A seeded uniform offset of the query boxes (meters,
  /// per coordinate) moves the check onto generic points.
  double box_offset = 0.05;
  double jitter = 0.0;  // std of Gaussian noise added to every parameter
  std::uint64_t seed = 0;
  /// Negative control: scales the analytic gradient of this block by
  /// (1 + corrupt_scale), emulating a faulty adjoint.
  std::string corrupt_block;
  double corrupt_scale = 0.1;
};

struct BlockCheck {
  std::string name;
  std::size_t size = 0, checked = 0;
  double worst_rel = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0, numeric = 0.0;
};

struct GradcheckReport {
  std::vector<BlockCheck> blocks;
  double tolerance = 0.0, step = 0.0;
  double worst_rel = 0.0;
  std::string worst_block;
  bool pass = true;
  std::vector<std::string> failed;
};

inline GradcheckReport gradcheck(const RunConfig& rc, const GradcheckOptions& opt = {}) {
  const Scene scene = generate_scene(rc.scene, hash_combine(opt.seed, 0x6c));
  const FeatureAtlas atlas = encode_oracle_features(scene, rc.features);
  RunConfig run = rc;
  run.seed = opt.seed;
  DecoderParams params = init_model(run);
  ParameterList plist = params.parameters();
  Rng rng(hash_combine(opt.seed, 0x717));
  if (opt.box_offset > 0.0) {
    auto boxes = params.query_boxes.data();
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (i % kBoxParams < 3) boxes[i] += rng.uniform(-opt.box_offset, opt.box_offset);
  }
  if (opt.jitter > 0.0)
    for (NamedTensor& p : plist)
      for (double& v : p.tensor.data()) v += rng.normal(0.0, opt.jitter);

  const DecodeOptions dopt{0, hash_combine(opt.seed, 0x3e)};
  auto loss_value = [&]() {
    Tape tape;
    const auto outs = decode(tape, params, atlas, scene.rig, scene.grid, dopt);
    return set_prediction_loss(tape, outs, scene.boxes, rc.loss).total.item();
  };
  {
    params.zero_grad();
    Tape tape;
    const auto outs = decode(tape, params, atlas, scene.rig, scene.grid, dopt);
    tape.backward(set_prediction_loss(tape, outs, scene.boxes, rc.loss).total);
  }

  GradcheckReport rep;
  rep.tolerance = opt.tolerance;
  rep.step = opt.step;
  for (NamedTensor& p : plist) {
    BlockCheck bc;
    bc.name = p.name;
    bc.size = p.tensor.numel();
    std::vector<std::size_t> idx(bc.size);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t want = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(opt.entries_per_block));
    for (std::size_t i = 0; i < want; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(want);
    std::sort(idx.begin(), idx.end());
    const double scale = p.name == opt.corrupt_block ? 1.0 + opt.corrupt_scale : 1.0;
    auto data = p.tensor.data();
    for (std::size_t i : idx) {
      const double saved = data[i];
      data[i] = saved + opt.step;
      const double up = loss_value();
      data[i] = saved - opt.step;
      const double down = loss_value();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double analytic = p.tensor.grad()[i] * scale;
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      ++bc.checked;
      if (rel > bc.worst_rel || bc.checked == 1) {
        bc.worst_rel = rel;
        bc.worst_index = i;
        bc.analytic = analytic;
        bc.numeric = numeric;
      }
    }
    if (bc.worst_rel >= opt.tolerance) {
      rep.pass = false;
      rep.failed.push_back(bc.name);
    }
    if (bc.worst_rel >= rep.worst_rel) {
      rep.worst_rel = bc.worst_rel;
      rep.worst_block = bc.name;
    }
    rep.blocks.push_back(bc);
  }
  return rep;
}

inline nlohmann::json gradcheck_to_json(const GradcheckReport& rep) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockCheck& b : rep.blocks)
    blocks.push_back({{"name", b.name},
                      {"size", b.size},
                      {"checked", b.checked},
                      {"worst_rel_error", b.worst_rel},
                      {"worst_index", b.worst_index},
                      {"analytic", b.analytic},
                      {"numeric", b.numeric},
                      {"pass", b.worst_rel < rep.tolerance}});
  return {{"schema", kGradcheckSchema}, {"step", rep.step},       {"tolerance", rep.tolerance},
          {"pass", rep.pass},           {"worst_rel_error", rep.worst_rel}, {"worst_block", rep.worst_block},
          {"failed_blocks", rep.failed}, {"blocks", blocks}};
}

}  // namespace poifusion
