#include "apt/dataio.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace apt {

std::string DatasetSchema::describe() const {
  std::ostringstream os;
  os << "dim=" << dim << " d_a=" << d_a << " d_z=" << d_z << " scalars=[";
  for (size_t i = 0; i < scalar_names.size(); ++i) os << (i ? "," : "") << scalar_names[i];
  os << "]";
  return os.str();
}

const std::string& Dataset::id() const {
  static const std::string unnamed = "unnamed";
  auto it = meta.find("dataset_id");
  return it == meta.end() ? unnamed : it->second;
}

void Dataset::validate() const {
  for (const PointCloudSample& s : samples) {
    s.validate();
    if (int64_t(s.scalars.size()) != int64_t(schema.scalar_names.size()))
      fail(ErrorKind::data, "sample scalar count does not match the dataset schema");
  }
}

Array2D sample_anchors(const PointCloudSample& sample, int64_t dim) {
  auto it = sample.meta.find("anchors");
  if (it == sample.meta.end() || it->second.empty()) return Array2D(0, dim);
  std::vector<double> coords;
  std::istringstream points(it->second);
  std::string point;
  while (std::getline(points, point, ';')) {
    std::istringstream axes(point);
    std::string axis;
    int64_t seen = 0;
    while (std::getline(axes, axis, ',')) {
      coords.push_back(std::stod(axis));
      ++seen;
    }
    if (seen != dim) fail(ErrorKind::data, "malformed anchors metadata: '" + it->second + "'");
  }
  Array2D out(int64_t(coords.size()) / dim, dim);
  out.v = std::move(coords);
  return out;
}

std::string encode_anchors(const Array2D& anchors) {
  std::ostringstream os;
  os.precision(17);
  for (int64_t i = 0; i < anchors.rows; ++i) {
    if (i) os << ";";
    for (int64_t j = 0; j < anchors.cols; ++j) {
      if (j) os << ",";
      os << anchors.at(i, j);
    }
  }
  return os.str();
}

RescaleTransform dataset_rescale(const Dataset& ds, double target_extent) {
  auto it = ds.meta.find("domain");
  if (it == ds.meta.end())
    fail(ErrorKind::data, "dataset '" + ds.id() + "' carries no domain bounds");
  std::vector<double> bounds;
  std::istringstream is(it->second);
  std::string tok;
  while (std::getline(is, tok, ',')) bounds.push_back(std::stod(tok));
  if (bounds.size() != size_t(2 * ds.schema.dim))
    fail(ErrorKind::data, "domain bounds must list lo/hi per axis");
  RescaleTransform t;
  t.extent = target_extent;
  for (int64_t a = 0; a < ds.schema.dim; ++a) {
    double lo = bounds[size_t(a)];
    double hi = bounds[size_t(ds.schema.dim + a)];
    t.lo.push_back(lo);
    t.scale.push_back(hi > lo ? target_extent / (hi - lo) : 0.0);
  }
  return t;
}

// ---------------------------------------------------------------------------
// little-endian stream helpers

namespace {

constexpr char kDatasetMagic[6] = {'A', 'P', 'T', 'D', 'S', '1'};
constexpr char kCheckpointMagic[6] = {'A', 'P', 'T', 'C', 'K', '1'};
constexpr uint16_t kFormatVersion = 1;

class Writer {
 public:
  void raw(const void* data, size_t len) {
    const char* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + len);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void u16(uint16_t v) { put_le(v); }
  void u32(uint32_t v) { put_le(v); }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(bits);
  }
  void str16(const std::string& s) {
    if (s.size() > 0xffff) fail(ErrorKind::io, "string too long for format");
    u16(uint16_t(s.size()));
    raw(s.data(), s.size());
  }
  void str32(const std::string& s) {
    u32(uint32_t(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  template <class T>
  void put_le(T v) {
    for (size_t i = 0; i < sizeof(T); ++i) {
      uint8_t byte = uint8_t((v >> (8 * i)) & 0xff);
      raw(&byte, 1);
    }
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::string path, std::vector<char> bytes)
      : path_(std::move(path)), buf_(std::move(bytes)) {}

  size_t offset() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }
  const std::vector<char>& bytes() const { return buf_; }

  void raw(void* out, size_t len) {
    if (pos_ + len > buf_.size())
      fail(ErrorKind::io, path_ + ": truncated at byte offset " + std::to_string(pos_) +
                              " (needed " + std::to_string(len) + " more bytes)");
    std::memcpy(out, buf_.data() + pos_, len);
    pos_ += len;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() { return get_le<uint16_t>(); }
  uint32_t u32() { return get_le<uint32_t>(); }
  float f32() {
    uint32_t bits = get_le<uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = get_le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str16() {
    uint16_t len = u16();
    std::string s(len, '\0');
    raw(s.data(), len);
    return s;
  }
  std::string str32() {
    uint32_t len = u32();
    std::string s(len, '\0');
    raw(s.data(), len);
    return s;
  }
  [[noreturn]] void error(const std::string& what) {
    fail(ErrorKind::io, path_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

 private:
  template <class T>
  T get_le() {
    uint8_t bytes[sizeof(T)];
    raw(bytes, sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= T(bytes[i]) << (8 * i);
    return v;
  }
  std::string path_;
  std::vector<char> buf_;
  size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return bytes;
}

// atomic: write to a temp file in the same directory, then rename
void write_file(const std::string& path, const std::vector<char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail(ErrorKind::io, "short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "rename '" + tmp + "' -> '" + path + "': " + ec.message());
}

void write_array(Writer& w, const Array2D& a) {
  for (double v : a.v) w.f32(float(v));
}

Array2D read_array(Reader& r, int64_t rows, int64_t cols) {
  Array2D a(rows, cols);
  for (auto& v : a.v) v = double(r.f32());
  return a;
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  if (ds.samples.size() > 0xffffffffu) fail(ErrorKind::io, "too many samples");
  Writer w;
  w.raw(kDatasetMagic, 6);
  w.u16(kFormatVersion);
  w.u32(uint32_t(ds.samples.size()));
  w.u8(uint8_t(ds.schema.dim));
  w.u8(uint8_t(ds.schema.d_a));
  w.u8(uint8_t(ds.schema.d_z));
  w.u8(uint8_t(ds.schema.scalar_names.size()));
  for (const std::string& name : ds.schema.scalar_names) w.str16(name);

  for (const PointCloudSample& s : ds.samples) {
    w.u8(uint8_t(s.mode));
    w.u16(uint16_t(s.times.size()));
    for (double t : s.times) w.f32(float(t));
    if (s.mode == MeshMode::fixed) {
      w.u32(uint32_t(s.coords.rows));
      write_array(w, s.coords);
      write_array(w, s.features);
      for (double v : s.scalars) w.f32(float(v));
      for (const Array2D& f : s.fields) write_array(w, f);
    } else {
      for (double v : s.scalars) w.f32(float(v));
      for (const Snapshot& snap : s.snapshots) {
        w.u32(uint32_t(snap.coords.rows));
        write_array(w, snap.coords);
        write_array(w, snap.features);
        write_array(w, snap.fields);
      }
    }
  }

  // metadata block: file-level entries plus per-sample entries
  std::vector<std::string> lines;
  for (const auto& [key, value] : ds.meta) lines.push_back(key + "=" + value);
  for (size_t i = 0; i < ds.samples.size(); ++i)
    for (const auto& [key, value] : ds.samples[i].meta)
      lines.push_back("sample." + std::to_string(i) + "." + key + "=" + value);
  if (lines.size() > 0xffff) fail(ErrorKind::io, "metadata block too large");
  w.u16(uint16_t(lines.size()));
  for (const std::string& line : lines) w.str16(line);

  write_file(path, w.bytes());
}

Dataset read_dataset(const std::string& path) {
  Reader r(path, read_file(path));
  char magic[6];
  r.raw(magic, 6);
  if (std::memcmp(magic, kDatasetMagic, 6) != 0)
    fail(ErrorKind::io, path + ": magic mismatch at byte offset 0 (not an APTDS file)");
  uint16_t version = r.u16();
  if (version != kFormatVersion)
    fail(ErrorKind::io, path + ": unsupported APTDS version " + std::to_string(version) +
                            " (this build reads version " + std::to_string(kFormatVersion) +
                            ")");
  Dataset ds;
  const uint32_t n_samples = r.u32();
  ds.schema.dim = r.u8();
  ds.schema.d_a = r.u8();
  ds.schema.d_z = r.u8();
  const uint8_t n_scalars = r.u8();
  for (uint8_t i = 0; i < n_scalars; ++i) ds.schema.scalar_names.push_back(r.str16());

  ds.samples.resize(n_samples);
  for (uint32_t i = 0; i < n_samples; ++i) {
    PointCloudSample& s = ds.samples[i];
    const uint8_t mode = r.u8();
    if (mode > 1) r.error("invalid mesh_mode " + std::to_string(mode));
    s.mode = MeshMode(mode);
    const uint16_t n_times = r.u16();
    s.times.resize(n_times);
    for (auto& t : s.times) t = double(r.f32());
    if (s.mode == MeshMode::fixed) {
      const uint32_t n_nodes = r.u32();
      s.coords = read_array(r, n_nodes, ds.schema.dim);
      s.features = read_array(r, n_nodes, ds.schema.d_a);
      s.scalars.resize(n_scalars);
      for (auto& v : s.scalars) v = double(r.f32());
      for (uint16_t t = 0; t < n_times; ++t)
        s.fields.push_back(read_array(r, n_nodes, ds.schema.d_z));
    } else {
      s.scalars.resize(n_scalars);
      for (auto& v : s.scalars) v = double(r.f32());
      for (uint16_t t = 0; t < n_times; ++t) {
        Snapshot snap;
        const uint32_t n_nodes = r.u32();
        snap.coords = read_array(r, n_nodes, ds.schema.dim);
        snap.features = read_array(r, n_nodes, ds.schema.d_a);
        snap.fields = read_array(r, n_nodes, ds.schema.d_z);
        s.snapshots.push_back(std::move(snap));
      }
    }
  }

  const uint16_t n_lines = r.u16();
  for (uint16_t i = 0; i < n_lines; ++i) {
    std::string line = r.str16();
    auto eq = line.find('=');
    if (eq == std::string::npos) r.error("metadata line without '='");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.rfind("sample.", 0) == 0) {
      size_t dot = key.find('.', 7);
      if (dot == std::string::npos) r.error("malformed per-sample metadata key '" + key + "'");
      size_t idx = std::stoul(key.substr(7, dot - 7));
      if (idx >= ds.samples.size()) r.error("metadata references sample " + std::to_string(idx));
      ds.samples[idx].meta[key.substr(dot + 1)] = value;
    } else {
      ds.meta[key] = value;
    }
  }
  if (r.remaining() != 0)
    fail(ErrorKind::io, path + ": " + std::to_string(r.remaining()) +
                            " trailing bytes after metadata block (count mismatch)");
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// checkpoints

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = seed ^ 0xffffffffu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

namespace {

void write_stats(Writer& w, const NormalizationStats& st) {
  auto vec = [&](const std::vector<double>& v) {
    w.u8(uint8_t(v.size()));
    for (double x : v) w.f64(x);
  };
  vec(st.feat_mean);
  vec(st.feat_std);
  vec(st.field_mean);
  vec(st.field_std);
  vec(st.scalar_mean);
  vec(st.scalar_std);
  w.f64(st.time_scale);
}

NormalizationStats read_stats(Reader& r) {
  NormalizationStats st;
  auto vec = [&](std::vector<double>& v) {
    uint8_t n = r.u8();
    v.resize(n);
    for (auto& x : v) x = r.f64();
  };
  vec(st.feat_mean);
  vec(st.feat_std);
  vec(st.field_mean);
  vec(st.field_std);
  vec(st.scalar_mean);
  vec(st.scalar_std);
  st.time_scale = r.f64();
  return st;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointPayload& payload) {
  Writer w;
  w.raw(kCheckpointMagic, 6);
  w.u16(kFormatVersion);
  w.str32(payload.config_echo);
  w.u16(uint16_t(payload.stats.size()));
  for (const auto& [id, st] : payload.stats) {
    w.str16(id);
    write_stats(w, st);
  }
  w.u32(uint32_t(payload.params.size()));
  for (const auto& [name, entry] : payload.params) {
    w.str16(name);
    w.u8(uint8_t(entry.dtype));
    w.u8(uint8_t(entry.shape.size()));
    int64_t numel = 1;
    for (int64_t e : entry.shape) {
      w.u32(uint32_t(e));
      numel *= e;
    }
    if (numel != int64_t(entry.values.size()))
      fail(ErrorKind::io, "checkpoint entry '" + name + "' shape/payload mismatch");
    for (double v : entry.values) {
      if (entry.dtype == Dtype::f32)
        w.f32(float(v));
      else
        w.f64(v);
    }
  }
  const uint32_t crc =
      crc32(reinterpret_cast<const uint8_t*>(w.bytes().data()), w.bytes().size());
  w.u32(crc);
  write_file(path, w.bytes());
}

CheckpointPayload load_checkpoint(const std::string& path) {
  Reader r(path, read_file(path));
  if (r.bytes().size() < 12) fail(ErrorKind::io, path + ": too short to be a checkpoint");
  {
    const auto& all = r.bytes();
    uint32_t stored = 0;
    for (size_t i = 0; i < 4; ++i) stored |= uint32_t(uint8_t(all[all.size() - 4 + i])) << (8 * i);
    uint32_t computed = crc32(reinterpret_cast<const uint8_t*>(all.data()), all.size() - 4);
    if (stored != computed)
      fail(ErrorKind::io, path + ": checksum mismatch (stored " + std::to_string(stored) +
                              ", computed " + std::to_string(computed) + "); file corrupted");
  }
  char magic[6];
  r.raw(magic, 6);
  if (std::memcmp(magic, kCheckpointMagic, 6) != 0)
    fail(ErrorKind::io, path + ": magic mismatch at byte offset 0 (not a checkpoint)");
  uint16_t version = r.u16();
  if (version != kFormatVersion)
    fail(ErrorKind::io, path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointPayload payload;
  payload.config_echo = r.str32();
  const uint16_t n_stats = r.u16();
  for (uint16_t i = 0; i < n_stats; ++i) {
    std::string id = r.str16();
    payload.stats[id] = read_stats(r);
  }
  const uint32_t n_params = r.u32();
  for (uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.str16();
    CheckpointPayload::Entry entry;
    uint8_t dtype_tag = r.u8();
    if (dtype_tag > 1) r.error("invalid dtype tag in entry '" + name + "'");
    entry.dtype = Dtype(dtype_tag);
    uint8_t rank = r.u8();
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      entry.shape.push_back(int64_t(r.u32()));
      numel *= entry.shape.back();
    }
    entry.values.resize(size_t(numel));
    for (auto& v : entry.values) v = entry.dtype == Dtype::f32 ? double(r.f32()) : r.f64();
    payload.params[name] = std::move(entry);
  }
  return payload;
}

}  // namespace apt
