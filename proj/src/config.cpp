#include "refseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct TypeMismatch {
  const char* expected;
};

std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) throw TypeMismatch{"non-negative integer"};
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) throw TypeMismatch{"non-negative integer"};
  return v;
}

double to_real(const std::string& s) {
  if (s.empty()) throw TypeMismatch{"real number"};
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw TypeMismatch{"real number"};
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw TypeMismatch{"boolean"};
}

Triple to_triple(const std::string& s) {
  const auto parts = split_list(s);
  try {
    if (parts.size() == 1) {
      const auto v = to_size(parts[0]);
      return {v, v, v};
    }
    if (parts.size() == 3) return {to_size(parts[0]), to_size(parts[1]), to_size(parts[2])};
  } catch (const TypeMismatch&) {
  }
  throw TypeMismatch{"integer triple (a,b,c)"};
}

std::vector<std::size_t> to_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  try {
    for (const auto& p : split_list(s)) out.push_back(to_size(p));
  } catch (const TypeMismatch&) {
    throw TypeMismatch{"comma-separated integer list"};
  }
  return out;
}

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class Seq>
std::string join(const Seq& seq) {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : seq) {
    if (!first) os << ",";
    os << v;
    first = false;
  }
  return os.str();
}

struct Field {
  std::string key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

template <class Section, class T>
Field field(std::string key, Section ModelConfig::*sec, T Section::*member) {
  Field f;
  f.key = std::move(key);
  f.get = [sec, member](const ModelConfig& c) -> std::string {
    const T& v = c.*sec.*member;
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, double>) {
      return real_str(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, Triple> || std::is_same_v<T, std::vector<std::size_t>> ||
                         std::is_same_v<T, std::vector<std::string>>) {
      return join(v);
    } else {
      return std::to_string(v);
    }
  };
  f.set = [sec, member](ModelConfig& c, const std::string& s) {
    T& v = c.*sec.*member;
    if constexpr (std::is_same_v<T, bool>) {
      v = to_bool(s);
    } else if constexpr (std::is_same_v<T, double>) {
      v = to_real(s);
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = s;
    } else if constexpr (std::is_same_v<T, Triple>) {
      v = to_triple(s);
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      v = to_size_list(s);
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      v = split_list(s);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      v = to_u64(s);
    } else {
      v = to_size(s);
    }
  };
  return f;
}

const std::vector<Field>& fields() {
  using M = ModelConfig;
  static const std::vector<Field> table = {
      field("encoder.in_channels", &M::encoder, &EncoderConfig::in_channels),
      field("encoder.embed_dim", &M::encoder, &EncoderConfig::embed_dim),
      field("encoder.patch_k", &M::encoder, &EncoderConfig::patch_k),
      field("encoder.depth_patch", &M::encoder, &EncoderConfig::depth_patch),
      field("encoder.num_stages", &M::encoder, &EncoderConfig::num_stages),
      field("encoder.blocks_per_stage", &M::encoder, &EncoderConfig::blocks_per_stage),
      field("encoder.window", &M::encoder, &EncoderConfig::window),
      field("encoder.window_shift", &M::encoder, &EncoderConfig::window_shift),
      field("encoder.num_heads", &M::encoder, &EncoderConfig::num_heads),
      field("encoder.mlp_ratio", &M::encoder, &EncoderConfig::mlp_ratio),
      field("encoder.use_adapters", &M::encoder, &EncoderConfig::use_adapters),
      field("encoder.adapter_rank", &M::encoder, &EncoderConfig::adapter_rank),
      field("encoder.adapter_kernel", &M::encoder, &EncoderConfig::adapter_kernel),
      field("encoder.max_grid", &M::encoder, &EncoderConfig::max_grid),
      field("encoder.bottleneck_dim", &M::encoder, &EncoderConfig::bottleneck_dim),
      field("encoder.bottleneck_kernel", &M::encoder, &EncoderConfig::bottleneck_kernel),
      field("text.vocab", &M::text, &TextConfig::vocab),
      field("text.embed_dim", &M::text, &TextConfig::embed_dim),
      field("text.max_len", &M::text, &TextConfig::max_len),
      field("text.layers", &M::text, &TextConfig::layers),
      field("text.heads", &M::text, &TextConfig::heads),
      field("text.mlp_ratio", &M::text, &TextConfig::mlp_ratio),
      field("text.pooling", &M::text, &TextConfig::pooling),
      field("text.frozen", &M::text, &TextConfig::frozen),
      field("crossmodal.use_text", &M::crossmodal, &CrossModalConfig::use_text),
      field("crossmodal.use_projector", &M::crossmodal, &CrossModalConfig::use_projector),
      field("crossmodal.projector_hidden", &M::crossmodal, &CrossModalConfig::projector_hidden),
      field("crossmodal.stages", &M::crossmodal, &CrossModalConfig::stages),
      field("crossmodal.heads", &M::crossmodal, &CrossModalConfig::heads),
      field("crossmodal.sparse_tokens", &M::crossmodal, &CrossModalConfig::sparse_tokens),
      field("decoder.num_upsample_layers", &M::decoder, &DecoderConfig::num_upsample_layers),
      field("decoder.transformer_layers", &M::decoder, &DecoderConfig::transformer_layers),
      field("decoder.heads", &M::decoder, &DecoderConfig::heads),
      field("decoder.attn_dim", &M::decoder, &DecoderConfig::attn_dim),
      field("decoder.mlp_dim", &M::decoder, &DecoderConfig::mlp_dim),
      field("decoder.channels", &M::decoder, &DecoderConfig::channels),
      field("decoder.mlam_enabled", &M::decoder, &DecoderConfig::mlam_enabled),
      field("decoder.fuse_with_input", &M::decoder, &DecoderConfig::fuse_with_input),
      field("train.epochs", &M::train, &TrainConfig::epochs),
      field("train.batch_size", &M::train, &TrainConfig::batch_size),
      field("train.lr", &M::train, &TrainConfig::lr),
      field("train.weight_decay", &M::train, &TrainConfig::weight_decay),
      field("train.beta1", &M::train, &TrainConfig::beta1),
      field("train.beta2", &M::train, &TrainConfig::beta2),
      field("train.adam_eps", &M::train, &TrainConfig::adam_eps),
      field("train.schedule", &M::train, &TrainConfig::schedule),
      field("train.seed", &M::train, &TrainConfig::seed),
      field("train.checkpoint_every", &M::train, &TrainConfig::checkpoint_every),
      field("train.max_steps", &M::train, &TrainConfig::max_steps),
      field("train.augment", &M::train, &TrainConfig::augment),
      field("train.patch", &M::train, &TrainConfig::patch),
      field("data.dims", &M::data, &DataConfig::dims),
      field("data.classes", &M::data, &DataConfig::classes),
      field("data.samples", &M::data, &DataConfig::samples),
      field("data.min_fraction", &M::data, &DataConfig::min_fraction),
      field("data.max_fraction", &M::data, &DataConfig::max_fraction),
  };
  return table;
}

const std::set<std::string> kAugmentNames{"rotate90", "flip", "erase", "scale-intensity", "contrast", "brightness"};
const std::set<std::string> kShapeClasses{"sphere", "cube", "slab"};

}  // namespace

std::vector<std::size_t> upsample_strides(std::size_t factor, std::size_t layers) {
  if (factor == 0 || layers == 0) throw ConfigError("upsampling factor and layer count must be positive");
  std::vector<std::size_t> f;
  std::size_t n = factor;
  for (std::size_t p = 2; p * p <= n; ++p)
    while (n % p == 0) {
      f.push_back(p);
      n /= p;
    }
  if (n > 1) f.push_back(n);
  std::sort(f.begin(), f.end());
  while (f.size() > layers) {
    f[1] *= f[0];
    f.erase(f.begin());
    std::sort(f.begin(), f.end());
  }
  f.resize(layers, 1);
  return f;
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  const auto& e = encoder;
  if (e.in_channels == 0) v.push_back("encoder.in_channels must be positive");
  if (e.embed_dim == 0) v.push_back("encoder.embed_dim must be positive");
  if (e.num_heads == 0 || (e.embed_dim % std::max<std::size_t>(e.num_heads, 1)))
    v.push_back("encoder.embed_dim must be divisible by encoder.num_heads");
  if (e.patch_k == 0 || e.depth_patch == 0) v.push_back("encoder.patch_k and encoder.depth_patch must be positive");
  if (e.num_stages == 0 || e.blocks_per_stage == 0) v.push_back("encoder.num_stages and encoder.blocks_per_stage must be positive");
  if (e.window[0] == 0 || e.window[1] == 0 || e.window[2] == 0) v.push_back("encoder.window entries must be positive");
  if (e.window_shift) v.push_back("encoder.window_shift=true is not supported (plain windows only)");
  if (e.mlp_ratio == 0) v.push_back("encoder.mlp_ratio must be positive");
  if (e.adapter_rank == 0 || e.adapter_rank >= e.embed_dim) v.push_back("encoder.adapter_rank must satisfy 0 < rank < embed_dim");
  if (e.adapter_kernel % 2 == 0) v.push_back("encoder.adapter_kernel must be odd");
  if (e.bottleneck_kernel % 2 == 0) v.push_back("encoder.bottleneck_kernel must be odd");
  if (e.max_grid[0] == 0 || e.max_grid[1] == 0 || e.max_grid[2] == 0) v.push_back("encoder.max_grid entries must be positive");
  if (e.bottleneck_dim != e.embed_dim)
    v.push_back("encoder.bottleneck_dim must equal encoder.embed_dim (the dense prompt is added to the image embedding)");

  const auto& t = text;
  if (t.embed_dim == 0 || t.heads == 0 || t.embed_dim % std::max<std::size_t>(t.heads, 1))
    v.push_back("text.embed_dim must be divisible by text.heads");
  if (t.max_len < 3) v.push_back("text.max_len must be at least 3 (BOS, one word, EOS)");
  if (t.layers == 0 || t.mlp_ratio == 0) v.push_back("text.layers and text.mlp_ratio must be positive");
  if (t.pooling != "mean" && t.pooling != "eos") v.push_back("text.pooling must be 'mean' or 'eos'");

  const auto& c = crossmodal;
  if (c.stages.empty()) v.push_back("crossmodal.stages must name at least one stage");
  std::set<std::size_t> seen;
  for (auto s : c.stages) {
    if (s == 0 || s > e.num_stages) v.push_back("crossmodal.stages entry " + std::to_string(s) + " outside 1.." + std::to_string(e.num_stages));
    if (!seen.insert(s).second) v.push_back("crossmodal.stages entry " + std::to_string(s) + " repeated");
  }
  if (c.heads == 0 || e.embed_dim % std::max<std::size_t>(c.heads, 1)) v.push_back("crossmodal.heads must divide encoder.embed_dim");
  if (c.sparse_tokens == 0) v.push_back("crossmodal.sparse_tokens must be positive");
  if (c.use_projector && c.projector_hidden == 0) v.push_back("crossmodal.projector_hidden must be positive");
  if (!c.use_projector && t.embed_dim > e.embed_dim)
    v.push_back("without a projector text.embed_dim must not exceed encoder.embed_dim");

  const auto& d = decoder;
  if (d.num_upsample_layers != 4) v.push_back("decoder.num_upsample_layers must be 4");
  if (d.channels.size() != d.num_upsample_layers) v.push_back("decoder.channels needs one entry per upsampling layer");
  for (auto ch : d.channels)
    if (ch == 0) v.push_back("decoder.channels entries must be positive");
  if (d.heads == 0 || d.attn_dim % std::max<std::size_t>(d.heads, 1)) v.push_back("decoder.attn_dim must be divisible by decoder.heads");
  if (d.mlp_dim == 0) v.push_back("decoder.mlp_dim must be positive");
  if (d.mlam_enabled && e.num_stages != d.num_upsample_layers)
    v.push_back("decoder.mlam_enabled needs encoder.num_stages == decoder.num_upsample_layers (one skip per layer)");

  const auto& tr = train;
  if (tr.epochs == 0) v.push_back("train.epochs must be positive");
  if (tr.batch_size == 0) v.push_back("train.batch_size must be positive");
  if (!(tr.lr > 0)) v.push_back("train.lr must be positive");
  if (tr.weight_decay < 0) v.push_back("train.weight_decay must be non-negative");
  if (tr.beta1 < 0 || tr.beta1 >= 1 || tr.beta2 < 0 || tr.beta2 >= 1) v.push_back("train.beta1/beta2 must lie in [0, 1)");
  if (tr.schedule != "linear" && tr.schedule != "constant") v.push_back("train.schedule must be 'linear' or 'constant'");
  for (const auto& a : tr.augment)
    if (!kAugmentNames.count(a)) v.push_back("train.augment: unknown transform '" + a + "'");

  const auto& da = data;
  if (da.classes.size() < 2) v.push_back("data.classes must name at least two shape classes");
  std::set<std::string> cls;
  for (const auto& k : da.classes) {
    if (!kShapeClasses.count(k)) v.push_back("data.classes: unknown shape class '" + k + "'");
    if (!cls.insert(k).second) v.push_back("data.classes: '" + k + "' repeated");
  }
  if (!(da.min_fraction > 0 && da.min_fraction < da.max_fraction && da.max_fraction <= 1))
    v.push_back("data fractions must satisfy 0 < min_fraction < max_fraction <= 1");
  if (da.dims[0] == 0 || da.dims[1] == 0 || da.dims[2] == 0) v.push_back("data.dims entries must be positive");
  for (int a = 0; a < 3; ++a)
    if (tr.patch[a] == 0 || tr.patch[a] > da.dims[a]) {
      v.push_back("train.patch must fit inside data.dims");
      break;
    }
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

bool ModelConfig::operator==(const ModelConfig& other) const { return serialize_config(*this) == serialize_config(other); }

ModelConfig parse_config(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::vector<std::string> unknown;
  std::set<std::string> assigned;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) {
      unknown.push_back(key);
      continue;
    }
    if (!assigned.insert(key).second) throw ConfigError("key " + key + " assigned twice");
    try {
      it->set(cfg, value);
    } catch (const TypeMismatch& tm) {
      throw ConfigError("key " + key + ": expected " + tm.expected + ", got '" + value + "'");
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  return cfg;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ModelConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << f.key.substr(dot + 1) << " = " << f.get(config) << "\n";
  }
  return os.str();
}

}  // namespace refseg
