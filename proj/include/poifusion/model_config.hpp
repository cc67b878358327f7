#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace poifusion {

enum class AnchorSet { center_only, center_and_corners };
enum class PoiMode { anchors_only, box_transform, box_transform_and_shift };
enum class FusionMode { dynamic, static_weights };
enum class ViewSelection { random, lowest_index };
enum class ScaleLogits { per_query, per_poi };
enum class RefineMode { compound, from_initial };
enum class MatchScope { per_iteration, final_only };

struct ModelConfig {
  int num_queries = 64;
  int groups = 4;
  int channels = 256;
  int iterations = 6;
  int heads = 8;
  int ffn_hidden = 512;
  int num_classes = 3;

  AnchorSet anchors = AnchorSet::center_and_corners;
  PoiMode poi_mode = PoiMode::box_transform_and_shift;
  bool per_group_box_transform = false;
  FusionMode fusion = FusionMode::dynamic;
  ViewSelection view_selection = ViewSelection::random;
  ScaleLogits scale_logits = ScaleLogits::per_query;
  RefineMode refine = RefineMode::compound;
  bool deep_supervision = true;
  MatchScope match_scope = MatchScope::per_iteration;

  double init_std = 0.02;
  double cls_prior = 0.01;
  std::uint64_t init_seed = 0;

  int group_channels() const { return channels / groups; }
  int anchors_per_group() const { return anchors == AnchorSet::center_only ? 1 : 9; }
  int pois_per_query() const { return groups * anchors_per_group(); }
  int head_dim() const { return channels / heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (num_queries < 1) fail("num_queries must be >= 1");
    if (groups < 1 || channels % groups != 0) fail("channels must be divisible by groups");
    if (group_channels() < 2) fail("each group needs at least 2 channels");
    if (heads < 1 || channels % heads != 0) fail("channels must be divisible by heads");
    if (iterations < 1) fail("iterations must be >= 1");
    if (ffn_hidden < 1) fail("ffn_hidden must be >= 1");
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (channels < 2) fail("channels must be >= 2");
  }
};

inline const char* to_string(AnchorSet v) { return v == AnchorSet::center_only ? "center_only" : "center_and_corners"; }
inline const char* to_string(PoiMode v) {
  switch (v) {
    case PoiMode::anchors_only: return "anchors_only";
    case PoiMode::box_transform: return "box_transform";
    case PoiMode::box_transform_and_shift: return "box_transform_and_shift";
  }
  return "?";
}
inline const char* to_string(FusionMode v) { return v == FusionMode::dynamic ? "dynamic" : "static"; }
inline const char* to_string(ViewSelection v) { return v == ViewSelection::random ? "random" : "lowest_index"; }
inline const char* to_string(ScaleLogits v) { return v == ScaleLogits::per_query ? "per_query" : "per_poi"; }
inline const char* to_string(RefineMode v) { return v == RefineMode::compound ? "compound" : "from_initial"; }
inline const char* to_string(MatchScope v) { return v == MatchScope::per_iteration ? "per_iteration" : "final_only"; }

}  // namespace poifusion
