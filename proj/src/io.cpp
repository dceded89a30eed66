#include "refseg/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "refseg/errors.hpp"

namespace refseg {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

constexpr char kVolumeMagic[4] = {'V', '3', 'D', '1'};
constexpr char kCheckpointMagic[4] = {'R', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string what) : bytes_(b), what_(std::move(what)) {}
  template <class T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw CorruptionError(what_ + " truncated: expected at least " + std::to_string(pos_ + n) + " bytes, found " + std::to_string(bytes_.size()));
    }
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("failed writing " + path);
}

std::vector<std::uint8_t> encode_volume(const Tensor& data, const std::array<float, 3>& spacing, VolumeType type) {
  const Shape& s = data.shape();
  if (s.size() < 3 || data.numel() != s[s.size() - 3] * s[s.size() - 2] * s[s.size() - 1]) {
    throw DimensionError("volume tensor must hold one [D, H, W] volume, got " + shape_str(s));
  }
  Writer w;
  w.put_bytes(kVolumeMagic, 4);
  w.put(static_cast<std::uint8_t>(type));
  for (std::size_t a = s.size() - 3; a < s.size(); ++a) w.put(static_cast<std::uint32_t>(s[a]));
  for (float sp : spacing) w.put(sp);
  for (double v : data.data()) {
    if (type == VolumeType::Mask) {
      if (v != 0.0 && v != 1.0) throw InputError("mask volume holds non-binary value " + std::to_string(v));
      w.put(static_cast<std::uint8_t>(v));
    } else {
      w.put(static_cast<float>(v));
    }
  }
  return w.bytes;
}

Volume3d decode_volume(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "volume file");
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kVolumeMagic, 4) != 0) throw FormatError("bad volume magic (expected V3D1)");
  Volume3d v;
  const auto type = r.get<std::uint8_t>();
  if (type > 1) throw FormatError("unknown volume dtype code " + std::to_string(type));
  v.type = static_cast<VolumeType>(type);
  Shape dims(3);
  for (auto& d : dims) {
    d = r.get<std::uint32_t>();
    if (d == 0) throw FormatError("volume has a zero extent");
  }
  for (auto& sp : v.spacing) sp = r.get<float>();
  const std::size_t n = shape_numel(dims);
  const std::size_t elem = v.type == VolumeType::Mask ? 1 : 4;
  if (r.remaining() != n * elem) {
    throw CorruptionError("volume payload is " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(n * elem));
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (v.type == VolumeType::Mask) {
      const auto b = r.get<std::uint8_t>();
      if (b > 1) throw InputError("mask voxel " + std::to_string(i) + " holds value " + std::to_string(b) + " (expected 0 or 1)");
      values[i] = b;
    } else {
      values[i] = r.get<float>();
    }
  }
  v.data = Tensor(dims, std::move(values));
  return v;
}

void write_volume(const std::string& path, const Tensor& data, const std::array<float, 3>& spacing, VolumeType type) {
  write_file_bytes(path, encode_volume(data, spacing, type));
}

Volume3d read_volume(const std::string& path) { return decode_volume(read_file_bytes(path)); }

void write_checkpoint(const std::string& path, const ParamStore& params, const std::string& config_text) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(params.all().size()));
  for (const auto& p : params.all()) {
    w.put_string(p.name);
    w.put(static_cast<std::uint8_t>(p.tag.frozen));
    w.put(static_cast<std::uint8_t>(p.tag.origin));
    w.put(static_cast<std::uint32_t>(p.value.dim()));
    for (auto e : p.value.shape()) w.put(static_cast<std::uint64_t>(e));
    const auto d = p.value.data();
    w.put_bytes(d.data(), d.size() * sizeof(double));
  }
  w.put_string(config_text);
  write_file_bytes(path, w.bytes);
}

Checkpoint read_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  Reader r(bytes, "checkpoint " + path);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter p;
    p.name = r.get_string();
    p.tag.frozen = r.get<std::uint8_t>() != 0;
    const auto origin = r.get<std::uint8_t>();
    if (origin > 3) throw FormatError(path + ": parameter " + p.name + " has unknown origin " + std::to_string(origin));
    p.tag.origin = static_cast<Origin>(origin);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    r.get_bytes(values.data(), values.size() * sizeof(double));
    p.value = Tensor(shape, std::move(values));
    ck.params.push_back(std::move(p));
  }
  ck.config_text = r.get_string();
  if (r.remaining() != 0) throw CorruptionError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

void load_checkpoint(ParamStore& params, const Checkpoint& ckpt) {
  if (ckpt.params.size() != params.all().size()) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.params.size()) + " tensors, model has " + std::to_string(params.all().size()));
  }
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    auto& dst = params.all()[i];
    const auto& src = ckpt.params[i];
    if (dst.name != src.name || dst.value.shape() != src.value.shape() || dst.tag.frozen != src.tag.frozen || dst.tag.origin != src.tag.origin) {
      throw FormatError("checkpoint tensor " + src.name + " " + shape_str(src.value.shape()) + " does not match model tensor " + dst.name +
                        " " + shape_str(dst.value.shape()));
    }
    std::copy(src.value.data().begin(), src.value.data().end(), dst.value.data().begin());
  }
}

std::string case_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", index);
  return buf;
}

void write_dataset(const std::string& dir, const std::vector<VolumeSample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::string cases;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const VolumeSample& s = samples[i];
    if (s.volume.size(0) != 1) throw InputError("volume files hold a single channel");
    const std::string id = case_id(i);
    const Triple d = s.dims();
    write_volume((fs::path(dir) / "images" / (id + ".v3d")).string(), reshape(s.volume, {d[0], d[1], d[2]}), {1.0f, 1.0f, 1.0f},
                 VolumeType::Float);
    write_volume((fs::path(dir) / "masks" / (id + ".v3d")).string(), s.mask, {1.0f, 1.0f, 1.0f}, VolumeType::Mask);
    nlohmann::ordered_json j;
    j["id"] = id;
    j["prompt"] = s.prompt;
    j["target"] = s.target;
    j["classes"] = s.classes;
    cases += j.dump() + "\n";
  }
  write_file_bytes((fs::path(dir) / "cases.jsonl").string(), std::vector<std::uint8_t>(cases.begin(), cases.end()));
}

std::vector<CaseRecord> read_cases(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  std::vector<CaseRecord> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CaseRecord r;
      r.id = j.at("id").get<std::string>();
      r.prompt = j.at("prompt").get<std::string>();
      r.target = j.value("target", std::string());
      r.classes = j.value("classes", std::vector<std::string>{});
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<VolumeSample> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<VolumeSample> out;
  for (const CaseRecord& r : read_cases((fs::path(dir) / "cases.jsonl").string())) {
    const Volume3d img = read_volume((fs::path(dir) / "images" / (r.id + ".v3d")).string());
    const Volume3d msk = read_volume((fs::path(dir) / "masks" / (r.id + ".v3d")).string());
    if (msk.type != VolumeType::Mask) throw FormatError("masks/" + r.id + ".v3d is not a mask volume");
    if (img.data.shape() != msk.data.shape()) throw DimensionError("image and mask of " + r.id + " differ in size");
    VolumeSample s;
    const Shape& d = img.data.shape();
    s.volume = reshape(img.data, {1, d[0], d[1], d[2]});
    s.mask = msk.data;
    s.prompt = r.prompt;
    s.target = r.target;
    s.classes = {r.target};
    s.labels.resize(s.mask.numel());
    const auto md = s.mask.data();
    for (std::size_t i = 0; i < s.labels.size(); ++i) s.labels[i] = md[i] > 0.5 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace refseg
