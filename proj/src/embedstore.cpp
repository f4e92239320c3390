#include "protoprobe/embedstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "protoprobe/detail/byteio.hpp"
#include "protoprobe/rng.hpp"

namespace protoprobe {

namespace fs = std::filesystem;
using detail::ByteReader;
using detail::ByteWriter;

void StoreHeader::validate() const {
  if (version != kStoreVersion) throw FormatError("store version " + std::to_string(version) + " is not supported");
  if (dim == 0 || grid_t == 0 || grid_f == 0 || classes == 0) {
    throw FormatError("store dimensions must be positive");
  }
  if (dtype_code != 0) throw FormatError("unknown dtype code " + std::to_string(dtype_code));
}

std::size_t EmbeddingRecord::positive_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

void pack_labels(std::span<const std::uint8_t> labels, std::span<std::uint8_t> out) {
  std::fill(out.begin(), out.end(), std::uint8_t{0});
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (labels[c]) out[c / 8] |= static_cast<std::uint8_t>(1u << (c % 8));
  }
}

std::vector<std::uint8_t> unpack_labels(std::span<const std::uint8_t> packed, std::size_t classes) {
  std::vector<std::uint8_t> labels(classes);
  for (std::size_t c = 0; c < classes; ++c) labels[c] = (packed[c / 8] >> (c % 8)) & 1u;
  return labels;
}

namespace {

void encode_header(ByteWriter& w, const StoreHeader& h) {
  for (char ch : kStoreMagic) w.put(ch);
  w.put(h.version);
  w.put(h.dim);
  w.put(h.grid_t);
  w.put(h.grid_f);
  w.put(h.classes);
  w.put(h.record_count);
  w.put(h.dtype_code);
  w.put(static_cast<std::uint8_t>(h.allow_empty ? 1 : 0));
  w.put(std::uint16_t{0});
}

StoreHeader decode_header(const char* bytes, std::size_t size, const fs::path& path) {
  ByteReader r(bytes, size, path.string());
  for (char expected : kStoreMagic) {
    if (r.get<char>() != expected) throw FormatError(path.string() + ": bad magic, not a PEMB store");
  }
  StoreHeader h;
  h.version = r.get<std::uint32_t>();
  h.dim = r.get<std::uint32_t>();
  h.grid_t = r.get<std::uint32_t>();
  h.grid_f = r.get<std::uint32_t>();
  h.classes = r.get<std::uint32_t>();
  h.record_count = r.get<std::uint64_t>();
  h.dtype_code = r.get<std::uint8_t>();
  const auto flags = r.get<std::uint8_t>();
  h.allow_empty = (flags & 1u) != 0;
  h.validate();
  return h;
}

void check_record(const StoreHeader& h, const EmbeddingRecord& rec, std::size_t index) {
  const auto tag = [&] { return "record " + std::to_string(index) + ": "; };
  if (rec.labels.size() != h.classes) {
    throw DimensionError(tag() + "label length " + std::to_string(rec.labels.size()) + " != C=" +
                         std::to_string(h.classes));
  }
  if (rec.cls.size() != h.dim) {
    throw DimensionError(tag() + "cls length " + std::to_string(rec.cls.size()) + " != D=" + std::to_string(h.dim));
  }
  if (rec.tokens.size() != std::size_t{h.dim} * h.token_count()) {
    throw DimensionError(tag() + "token count " + std::to_string(rec.tokens.size()) + " != D*S_t*S_f=" +
                         std::to_string(std::size_t{h.dim} * h.token_count()));
  }
  for (auto l : rec.labels) {
    if (l > 1) throw FormatError(tag() + "labels must be 0/1");
  }
  if (!h.allow_empty && rec.positive_count() == 0) {
    throw FormatError(tag() + "empty label set in a store without allow_empty");
  }
  const auto finite = [](float v) { return std::isfinite(v); };
  if (!std::all_of(rec.cls.begin(), rec.cls.end(), finite) ||
      !std::all_of(rec.tokens.begin(), rec.tokens.end(), finite)) {
    throw NumericError(tag() + "non-finite embedding value");
  }
}

void encode_record(ByteWriter& w, const StoreHeader& h, const EmbeddingRecord& rec) {
  w.put(rec.id);
  std::vector<std::uint8_t> packed(h.label_bytes());
  pack_labels(rec.labels, packed);
  w.put_bytes(packed);
  w.put_array<float>(rec.cls);
  w.put_array<float>(rec.tokens);
}

EmbeddingRecord decode_record(ByteReader& r, const StoreHeader& h) {
  EmbeddingRecord rec;
  rec.id = r.get<std::uint64_t>();
  std::vector<std::uint8_t> packed(h.label_bytes());
  r.get_bytes(packed);
  rec.labels = unpack_labels(packed, h.classes);
  rec.cls.resize(h.dim);
  r.get_array<float>(rec.cls);
  rec.tokens.resize(std::size_t{h.dim} * h.token_count());
  r.get_array<float>(rec.tokens);
  return rec;
}

std::ifstream open_for_read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return in;
}

StoreHeader read_header_checked(std::ifstream& in, const fs::path& path) {
  char buf[StoreHeader::kBytes];
  in.read(buf, sizeof buf);
  if (in.gcount() != static_cast<std::streamsize>(sizeof buf)) {
    throw FormatError(path.string() + ": file shorter than the store header");
  }
  StoreHeader h = decode_header(buf, sizeof buf, path);
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  const auto expected = h.record_offset(h.record_count);
  if (size != expected) {
    throw FormatError(path.string() + ": file is " + std::to_string(size) + " bytes, header implies " +
                      std::to_string(expected));
  }
  return h;
}

}  // namespace

std::uint64_t write_store(const fs::path& path, StoreHeader header, std::span<const EmbeddingRecord> records) {
  header.record_count = records.size();
  header.validate();
  ByteWriter w;
  encode_header(w, header);
  for (std::size_t i = 0; i < records.size(); ++i) {
    check_record(header, records[i], i);
    encode_record(w, header, records[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
  return w.size();
}

StoreHeader read_header(const fs::path& path) {
  auto in = open_for_read(path);
  return read_header_checked(in, path);
}

EmbeddingRecord read_record(const fs::path& path, std::uint64_t index) {
  auto in = open_for_read(path);
  const StoreHeader h = read_header_checked(in, path);
  if (index >= h.record_count) {
    throw RangeError(path.string() + ": record " + std::to_string(index) + " out of range (count " +
                     std::to_string(h.record_count) + ")");
  }
  std::vector<char> buf(h.record_bytes());
  in.seekg(static_cast<std::streamoff>(h.record_offset(index)));
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError("read failed for " + path.string());
  ByteReader r(buf.data(), buf.size(), path.string());
  return decode_record(r, h);
}

Store load_store(const fs::path& path) {
  auto in = open_for_read(path);
  Store store;
  store.header = read_header_checked(in, path);
  const std::size_t stride = store.header.record_bytes();
  std::vector<char> buf(stride * store.header.record_count);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!in && !buf.empty()) throw IoError("read failed for " + path.string());
  ByteReader r(buf.data(), buf.size(), path.string());
  store.records.reserve(store.header.record_count);
  for (std::uint64_t i = 0; i < store.header.record_count; ++i) {
    store.records.push_back(decode_record(r, store.header));
  }
  return store;
}

// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (classes == 0 || dim == 0 || grid_t == 0 || grid_f == 0) throw ConfigError("synth: dimensions must be positive");
  if (classes_min == 0 || classes_min > classes_max || classes_max > classes) {
    throw ConfigError("synth: need 1 <= classes_min <= classes_max <= C");
  }
  const std::uint64_t tokens = std::uint64_t{grid_t} * grid_f;
  if (event_footprint == 0 || event_footprint > tokens) {
    throw ConfigError("synth: event_footprint must lie in [1, S_t*S_f]");
  }
  // Planted events never overlap, so every active class keeps its footprint.
  if (std::uint64_t{event_footprint} * classes_max > tokens) {
    throw ConfigError("synth: event_footprint * classes_max exceeds the token count");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth: noise_sigma must be >= 0");
  if (!(correlation_rho >= 0.0 && correlation_rho < 1.0)) throw ConfigError("synth: correlation_rho must lie in [0, 1)");
}

StoreHeader SynthSpec::header() const {
  StoreHeader h;
  h.dim = dim;
  h.grid_t = grid_t;
  h.grid_f = grid_f;
  h.classes = classes;
  h.record_count = record_count;
  return h;
}

std::string SynthSpec::describe() const {
  std::ostringstream os;
  os << "synthetic C=" << classes << " D=" << dim << " grid=" << grid_t << "x" << grid_f << " labels=" << classes_min
     << ".." << classes_max << " footprint=" << event_footprint << " noise=" << noise_sigma
     << " rho=" << correlation_rho << " seed=" << seed << " split=" << split_stream << " n=" << record_count;
  return os.str();
}

Matrix<double> class_signatures(const SynthSpec& spec) {
  RngStream rng(spec.seed, 0);
  Matrix<double> u(spec.classes, spec.dim);
  for (Index c = 0; c < u.rows(); ++c) {
    double norm = 0.0;
    do {
      for (Index d = 0; d < u.cols(); ++d) u(c, d) = rng.gaussian();
      norm = u.row(c).norm();
    } while (norm == 0.0);
    u.row(c) /= norm;
  }
  return u;
}

std::vector<EmbeddingRecord> generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const Matrix<double> signatures = class_signatures(spec);
  const Index dim = spec.dim;
  const Index tokens = Index{spec.grid_t} * spec.grid_f;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  const double shared = std::sqrt(spec.correlation_rho);
  const double own = std::sqrt(1.0 - spec.correlation_rho);

  RngStream rng(spec.seed, 1 + spec.split_stream);
  std::vector<EmbeddingRecord> out;
  out.reserve(spec.record_count);
  Matrix<double> z(dim, tokens);
  Vector<double> common(dim);
  for (std::uint64_t i = 0; i < spec.record_count; ++i) {
    EmbeddingRecord rec;
    rec.id = (spec.split_stream << 32) | i;
    rec.labels.assign(spec.classes, 0);

    const auto k = spec.classes_min + static_cast<std::uint32_t>(rng.below(spec.classes_max - spec.classes_min + 1));
    std::vector<std::uint32_t> classes(spec.classes);
    for (std::uint32_t c = 0; c < spec.classes; ++c) classes[c] = c;
    for (std::uint32_t a = 0; a < k; ++a) {
      const auto b = a + static_cast<std::uint32_t>(rng.below(spec.classes - a));
      std::swap(classes[a], classes[b]);
    }
    std::vector<Index> positions(static_cast<std::size_t>(tokens));
    for (Index n = 0; n < tokens; ++n) positions[static_cast<std::size_t>(n)] = n;
    const std::size_t planted = std::size_t{k} * spec.event_footprint;
    for (std::size_t a = 0; a < planted; ++a) {
      const auto b = a + static_cast<std::size_t>(rng.below(positions.size() - a));
      std::swap(positions[a], positions[b]);
    }

    for (Index d = 0; d < dim; ++d) common(d) = rng.gaussian() * scale;
    for (Index n = 0; n < tokens; ++n) {
      for (Index d = 0; d < dim; ++d) z(d, n) = shared * common(d) + own * rng.gaussian() * scale;
    }
    std::size_t slot = 0;
    for (std::uint32_t a = 0; a < k; ++a) {
      const std::uint32_t c = classes[a];
      rec.labels[c] = 1;
      for (std::uint32_t e = 0; e < spec.event_footprint; ++e, ++slot) {
        const Index n = positions[slot];
        for (Index d = 0; d < dim; ++d) z(d, n) = signatures(c, d) + spec.noise_sigma * rng.gaussian() * scale;
      }
    }

    Matrix<float> zf = z.cast<float>();
    rec.tokens.assign(zf.data(), zf.data() + zf.size());
    rec.cls.resize(static_cast<std::size_t>(dim));
    for (Index d = 0; d < dim; ++d) {
      double acc = 0.0;
      for (Index n = 0; n < tokens; ++n) acc += static_cast<double>(zf(d, n));
      rec.cls[static_cast<std::size_t>(d)] = static_cast<float>(acc / static_cast<double>(tokens));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

Store generate_synthetic_store(const SynthSpec& spec) {
  Store s;
  s.records = generate_synthetic(spec);
  s.header = spec.header();
  s.header.record_count = s.records.size();
  return s;
}

std::uint64_t split_stream_id(const std::string& split) {
  if (split == "train") return 1;
  if (split == "val") return 2;
  if (split == "test") return 3;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

// ---------------------------------------------------------------------------

fs::path manifest_path_for(const fs::path& store_path) {
  fs::path p = store_path;
  p += ".manifest";
  return p;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "store=" << m.store_path << '\n';
  out << "provenance=" << m.provenance << '\n';
  out << "split=" << m.split << '\n';
  out << "classes=";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) out << (i ? "," : "") << m.class_names[i];
  out << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "store") {
      m.store_path = value;
    } else if (key == "provenance") {
      m.provenance = value;
    } else if (key == "split") {
      m.split = value;
    } else if (key == "classes") {
      std::stringstream ss(value);
      std::string name;
      while (std::getline(ss, name, ',')) m.class_names.push_back(name);
    }
    // Unknown keys are tolerated for forward compatibility.
  }
  return m;
}

}  // namespace protoprobe
