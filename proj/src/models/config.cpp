#include "volformer/models/config.hpp"

#include <functional>
#include <set>
#include <sstream>

#include "volformer/binary_io.hpp"
#include "volformer/error.hpp"
#include "volformer/text.hpp"

namespace volformer::models {

namespace {

const std::pair<Family, const char*> kFamilies[] = {
    {Family::trf_2d, "2d_trf"},
    {Family::fc_2d, "2d_fc"},
    {Family::bilstm_2d, "2d_bilstm"},
    {Family::trf_multiview_shared, "2d_trf_multiview_shared"},
    {Family::trf_multiview_individual, "2d_trf_multiview_individual"},
    {Family::conv2plus1d, "conv2plus1d"},
    {Family::conv3d, "conv3d"},
};

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

bool parse_size_list(std::string_view s, std::vector<std::size_t>& out) {
  out.clear();
  for (const auto& part : text::split(s, ',')) {
    std::size_t v;
    if (!text::parse_size(part, v)) return false;
    out.push_back(v);
  }
  return !out.empty();
}

bool parse_geometry_shape(std::string_view s, SliceGeometry& g) {
  std::vector<std::size_t> dims;
  if (!text::parse_dims(s, dims) || dims.size() != 2) return false;
  g.height = dims[0];
  g.width = dims[1];
  return true;
}

}  // namespace

std::string family_name(Family f) {
  for (auto& [fam, name] : kFamilies)
    if (fam == f) return name;
  return "?";
}

Family parse_family(const std::string& s) {
  for (auto& [fam, name] : kFamilies)
    if (s == name) return fam;
  std::string known;
  for (auto& [_, name] : kFamilies) known += (known.empty() ? "" : ", ") + std::string(name);
  throw ConfigError("unknown model family '" + s + "' (expected one of " + known + ")");
}

bool is_multiview(Family f) { return f == Family::trf_multiview_shared || f == Family::trf_multiview_individual; }
bool is_volumetric(Family f) { return f == Family::conv2plus1d || f == Family::conv3d; }

const SliceGeometry& ModelConfig::geometry_for(View v) const {
  auto it = view_geometry.find(v);
  return it == view_geometry.end() ? geometry : it->second;
}

std::size_t ModelConfig::total_tokens() const {
  std::size_t n = 0;
  for (View v : views) n += geometry_for(v).count;
  return n;
}

void ModelConfig::validate() const {
  if (views.empty()) throw ConfigError("model: views must not be empty");
  std::set<View> unique(views.begin(), views.end());
  if (unique.size() != views.size()) throw ConfigError("model: views contain duplicates");
  if (is_multiview(family) && views.size() < 2) {
    throw ConfigError("model: family " + family_name(family) + " needs at least 2 views");
  }
  if (!is_multiview(family) && views.size() != 1) {
    throw ConfigError("model: family " + family_name(family) + " takes exactly 1 view");
  }
  if (num_classes != 3) throw ConfigError("model: num_classes must be 3 (none, slow, fast)");
  for (auto& [v, _] : view_geometry) {
    if (!unique.count(v)) throw ConfigError("model: geometry override for unused view " + std::string(view_name(v)));
  }
  for (View v : views) {
    const auto& g = geometry_for(v);
    if (g.count == 0 || g.height == 0 || g.width == 0) {
      throw ConfigError("model: slice geometry of view " + std::string(view_name(v)) + " must be positive");
    }
  }
  encoder.validate();
  if (encoder.head_classes != 0) throw ConfigError("model: the slice encoder must not carry a classifier head");
  switch (family) {
    case Family::trf_2d:
    case Family::trf_multiview_shared:
    case Family::trf_multiview_individual:
      attention.validate();
      if (trf_blocks == 0) throw ConfigError("model: trf.blocks must be positive");
      break;
    case Family::fc_2d:
      if (fc_hidden == 0) throw ConfigError("model: fc.hidden must be positive");
      break;
    case Family::bilstm_2d:
      if (lstm_hidden == 0 || lstm_layers == 0) throw ConfigError("model: lstm.hidden and lstm.layers must be positive");
      break;
    case Family::conv2plus1d:
    case Family::conv3d:
      break;
  }
}

ModelConfig ModelConfig::parse(const std::string& content, const std::string& source) {
  ModelConfig cfg;
  bool preset_resnet50 = false;
  using Setter = std::function<bool(std::string_view)>;
  std::map<std::string, Setter> setters{
      {"family", [&](std::string_view s) { cfg.family = parse_family(std::string(s)); return true; }},
      {"views",
       [&](std::string_view s) {
         cfg.views.clear();
         for (const auto& part : text::split(s, ',')) cfg.views.push_back(parse_view(text::trim(part)));
         return true;
       }},
      {"in_channels", [&](std::string_view s) { return text::parse_size(s, cfg.encoder.in_channels); }},
      {"num_classes", [&](std::string_view s) { return text::parse_size(s, cfg.num_classes); }},
      {"seed", [&](std::string_view s) { return text::parse_u64(s, cfg.seed); }},
      {"init",
       [&](std::string_view s) {
         if (s == "random") {
           cfg.weights_path.clear();
           return true;
         }
         if (s.rfind("weights:", 0) == 0 && s.size() > 8) {
           cfg.weights_path = std::string(s.substr(8));
           return true;
         }
         return false;
       }},
      {"slice_count", [&](std::string_view s) { return text::parse_size(s, cfg.geometry.count); }},
      {"slice_shape", [&](std::string_view s) { return parse_geometry_shape(s, cfg.geometry); }},
      {"encoder.preset",
       [&](std::string_view s) {
         preset_resnet50 = s == "resnet50";
         return preset_resnet50 || s == "toy";
       }},
      {"encoder.stem_width", [&](std::string_view s) { return text::parse_size(s, cfg.encoder.stem_width); }},
      {"encoder.stem_kernel", [&](std::string_view s) { return text::parse_size(s, cfg.encoder.stem_kernel); }},
      {"encoder.stem_stride", [&](std::string_view s) { return text::parse_size(s, cfg.encoder.stem_stride); }},
      {"encoder.stem_pool", [&](std::string_view s) { return text::parse_bool(s, cfg.encoder.stem_pool); }},
      {"encoder.widths", [&](std::string_view s) { return parse_size_list(s, cfg.encoder.widths); }},
      {"encoder.blocks", [&](std::string_view s) { return parse_size_list(s, cfg.encoder.blocks); }},
      {"encoder.expansion", [&](std::string_view s) { return text::parse_size(s, cfg.encoder.expansion); }},
      {"trf.dim", [&](std::string_view s) { return text::parse_size(s, cfg.attention.dim); }},
      {"trf.blocks", [&](std::string_view s) { return text::parse_size(s, cfg.trf_blocks); }},
      {"trf.heads", [&](std::string_view s) { return text::parse_size(s, cfg.attention.heads); }},
      {"trf.mlp_ratio", [&](std::string_view s) { return text::parse_double(s, cfg.attention.mlp_ratio); }},
      {"trf.dropout", [&](std::string_view s) { return text::parse_double(s, cfg.attention.dropout); }},
      {"fc.hidden", [&](std::string_view s) { return text::parse_size(s, cfg.fc_hidden); }},
      {"lstm.hidden", [&](std::string_view s) { return text::parse_size(s, cfg.lstm_hidden); }},
      {"lstm.layers", [&](std::string_view s) { return text::parse_size(s, cfg.lstm_layers); }},
  };
  for (View v : kAllViews) {
    const std::string prefix(view_name(v));
    setters[prefix + ".slice_count"] = [&cfg, v](std::string_view s) {
      auto it = cfg.view_geometry.try_emplace(v, cfg.geometry).first;
      return text::parse_size(s, it->second.count);
    };
    setters[prefix + ".slice_shape"] = [&cfg, v](std::string_view s) {
      auto it = cfg.view_geometry.try_emplace(v, cfg.geometry).first;
      return parse_geometry_shape(s, it->second);
    };
  }

  struct Line {
    std::size_t number;
    std::string key, value;
  };
  std::vector<Line> lines;
  std::set<std::string> seen;
  std::istringstream in(content);
  std::string raw;
  for (std::size_t number = 1; std::getline(in, raw); ++number) {
    auto line = std::string_view(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = source + ":" + std::to_string(number) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    Line l{number, std::string(text::trim(line.substr(0, eq))), std::string(text::trim(line.substr(eq + 1)))};
    if (!setters.count(l.key)) throw ConfigError(where + "unknown key '" + l.key + "'");
    if (!seen.insert(l.key).second) throw ConfigError(where + "duplicate key '" + l.key + "'");
    lines.push_back(std::move(l));
  }
  // The preset fills the encoder first, shared geometry before per-view
  // overrides, so explicit keys always win regardless of their order.
  auto rank = [](const std::string& key) {
    if (key == "encoder.preset") return 0;
    if (key == "slice_count" || key == "slice_shape") return 1;
    if (key.find(".slice_") != std::string::npos) return 3;
    return 2;
  };
  std::stable_sort(lines.begin(), lines.end(), [&](const Line& a, const Line& b) { return rank(a.key) < rank(b.key); });
  for (const auto& l : lines) {
    const auto where = source + ":" + std::to_string(l.number) + ": ";
    bool ok;
    try {
      ok = setters[l.key](l.value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    if (!ok) throw ConfigError(where + "invalid value '" + l.value + "' for " + l.key);
    if (l.key == "encoder.preset" && preset_resnet50) {
      const auto channels = cfg.encoder.in_channels;
      cfg.encoder = nn::EncoderSpec::resnet50();
      cfg.encoder.head_classes = 0;
      cfg.encoder.in_channels = channels;
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

ModelConfig ModelConfig::load(const std::string& path) {
  const auto bytes = binary::read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()), path);
}

std::string ModelConfig::dump() const {
  std::ostringstream o;
  o << "family = " << family_name(family) << "\n";
  o << "views = ";
  for (std::size_t i = 0; i < views.size(); ++i) o << (i ? "," : "") << view_name(views[i]);
  o << "\n";
  o << "in_channels = " << encoder.in_channels << "\n";
  o << "num_classes = " << num_classes << "\n";
  o << "seed = " << seed << "\n";
  o << "init = " << (weights_path.empty() ? "random" : "weights:" + weights_path) << "\n";
  o << "slice_count = " << geometry.count << "\n";
  o << "slice_shape = " << geometry.height << "x" << geometry.width << "\n";
  for (auto& [v, g] : view_geometry) {
    o << view_name(v) << ".slice_count = " << g.count << "\n";
    o << view_name(v) << ".slice_shape = " << g.height << "x" << g.width << "\n";
  }
  o << "encoder.stem_width = " << encoder.stem_width << "\n";
  o << "encoder.stem_kernel = " << encoder.stem_kernel << "\n";
  o << "encoder.stem_stride = " << encoder.stem_stride << "\n";
  o << "encoder.stem_pool = " << (encoder.stem_pool ? "true" : "false") << "\n";
  o << "encoder.widths = " << join_sizes(encoder.widths) << "\n";
  o << "encoder.blocks = " << join_sizes(encoder.blocks) << "\n";
  o << "encoder.expansion = " << encoder.expansion << "\n";
  o << "trf.dim = " << attention.dim << "\n";
  o << "trf.blocks = " << trf_blocks << "\n";
  o << "trf.heads = " << attention.heads << "\n";
  o << "trf.mlp_ratio = " << text::format_double(attention.mlp_ratio) << "\n";
  o << "trf.dropout = " << text::format_double(attention.dropout) << "\n";
  o << "fc.hidden = " << fc_hidden << "\n";
  o << "lstm.hidden = " << lstm_hidden << "\n";
  o << "lstm.layers = " << lstm_layers << "\n";
  return o.str();
}

}  // namespace volformer::models
