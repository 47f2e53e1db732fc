#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "volformer/nn/blocks.hpp"
#include "volformer/view.hpp"

namespace volformer::models {

enum class Family {
  trf_2d,                       // slice encoder + Transformer
  fc_2d,                        // slice encoder + two FC layers
  bilstm_2d,                    // slice encoder + bidirectional LSTM
  trf_multiview_shared,         // one encoder for all views
  trf_multiview_individual,     // one encoder per view
  conv2plus1d,                  // factorized volumetric CNN
  conv3d,                       // full 3-D residual CNN
};

std::string family_name(Family f);
Family parse_family(const std::string& s);
bool is_multiview(Family f);
bool is_volumetric(Family f);

struct SliceGeometry {
  std::size_t count = 8;
  std::size_t height = 32;
  std::size_t width = 32;

  bool operator==(const SliceGeometry&) const = default;
};

struct ModelConfig {
  Family family = Family::trf_2d;
  std::vector<View> views{View::sag};
  std::size_t num_classes = 3;
  std::uint64_t seed = 0;
  std::string weights_path;  // empty: random init
  SliceGeometry geometry;
  std::map<View, SliceGeometry> view_geometry;  // per-view overrides

  nn::EncoderSpec encoder;
  nn::AttentionConfig attention;
  std::size_t trf_blocks = 2;
  std::size_t fc_hidden = 64;
  std::size_t lstm_hidden = 16;
  std::size_t lstm_layers = 1;

  const SliceGeometry& geometry_for(View v) const;
  std::size_t total_tokens() const;
  // Throws ConfigError naming the first violated rule.
  void validate() const;

  // Flat `key = value` text with `#` comments. Unknown or repeated keys and
  // malformed values are errors reported as "<source>:<line>: ...".
  static ModelConfig parse(const std::string& text, const std::string& source);
  static ModelConfig load(const std::string& path);
  // Canonical text listing every field; parse(dump()) reproduces the config.
  std::string dump() const;
};

}  // namespace volformer::models
