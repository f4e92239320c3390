#include "protoprobe/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "protoprobe/detail/byteio.hpp"

namespace protoprobe {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

struct Decoded {
  std::unique_ptr<Head<float>> head;
  std::vector<std::uint8_t> packed;
  Index packed_count = 0;
  Index packed_dim = 0;
};

Decoded decode(const std::vector<char>& bytes, const std::string& context) {
  detail::ByteReader r(bytes.data(), bytes.size(), context);
  for (char expected : kMagic) {
    if (r.get<char>() != expected) throw FormatError(context + ": bad magic, not a checkpoint");
  }
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw FormatError(context + ": unsupported checkpoint version " + std::to_string(v));
  }
  HeadKind kind;
  try {
    kind = parse_head_kind(r.get_string());
  } catch (const ConfigError& e) {
    throw FormatError(context + ": " + e.what());
  }
  HeadDims dims;
  dims.dim = r.get<std::uint32_t>();
  dims.grid_t = r.get<std::uint32_t>();
  dims.grid_f = r.get<std::uint32_t>();
  dims.classes = r.get<std::uint32_t>();
  HeadHyper hyper;
  hyper.mlp_hidden = r.get<std::uint32_t>();
  hyper.conv_kernel = r.get<std::uint32_t>();
  hyper.conv_hidden = r.get<std::uint32_t>();
  hyper.mhca_heads = r.get<std::uint32_t>();
  hyper.ep_queries = r.get<std::uint32_t>();
  hyper.abmilp_queries = r.get<std::uint32_t>();
  hyper.prototypes_per_class = r.get<std::uint32_t>();

  Decoded out;
  out.head = make_head<float>(kind, dims, hyper);
  auto& params = out.head->params();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw FormatError(context + ": " + std::to_string(count) + " tensors, " + std::string(head_name(kind)) +
                      " expects " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = r.get_string();
    if (name != p.name) throw FormatError(context + ": expected tensor '" + p.name + "', found '" + name + "'");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    if (shape != p.value.shape()) {
      throw FormatError(context + ": tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(p.value.shape()));
    }
    r.get_array<float>(std::span<float>(p.value.data(), static_cast<std::size_t>(p.value.size())));
  }
  if (kind == HeadKind::protobin) {
    out.packed_count = r.get<std::uint32_t>();
    out.packed_dim = r.get<std::uint32_t>();
    const auto n = r.get<std::uint64_t>();
    if (n != packed_prototype_bytes(out.packed_count, out.packed_dim) || n > r.remaining()) {
      throw FormatError(context + ": packed prototype blob has inconsistent size");
    }
    out.packed.resize(n);
    r.get_bytes(out.packed);
    if (out.packed != pack_prototypes<float>(Matrix<float>(out.head->param("P").matrix()))) {
      throw FormatError(context + ": packed prototypes disagree with the stored real-valued prototypes");
    }
  }
  if (r.remaining() != 0) throw FormatError(context + ": trailing bytes after checkpoint");
  return out;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<char> encode_checkpoint(const Head<float>& head) {
  detail::ByteWriter w;
  for (char ch : kMagic) w.put(ch);
  w.put(kVersion);
  w.put_string(head_name(head.kind()));
  const auto& d = head.dims();
  for (Index v : {d.dim, d.grid_t, d.grid_f, d.classes}) w.put(static_cast<std::uint32_t>(v));
  const auto& h = head.hyper();
  for (Index v : {h.mlp_hidden, h.conv_kernel, h.conv_hidden, h.mhca_heads, h.ep_queries, h.abmilp_queries,
                  h.prototypes_per_class}) {
    w.put(static_cast<std::uint32_t>(v));
  }
  w.put(static_cast<std::uint32_t>(head.params().size()));
  for (const auto& p : head.params()) {
    w.put_string(p.name);
    w.put(static_cast<std::uint32_t>(p.value.rank()));
    for (Index dim : p.value.shape()) w.put(static_cast<std::uint32_t>(dim));
    w.put_array<float>(std::span<const float>(p.value.data(), static_cast<std::size_t>(p.value.size())));
  }
  if (head.kind() == HeadKind::protobin) {
    const Matrix<float> protos = head.param("P").matrix();
    const auto packed = pack_prototypes(protos);
    w.put(static_cast<std::uint32_t>(protos.rows()));
    w.put(static_cast<std::uint32_t>(protos.cols()));
    w.put(static_cast<std::uint64_t>(packed.size()));
    w.put_bytes(packed);
  }
  return w.bytes();
}

std::unique_ptr<Head<float>> decode_checkpoint(const std::vector<char>& bytes, const std::string& context) {
  return decode(bytes, context).head;
}

void save_checkpoint(const std::filesystem::path& path, const Head<float>& head) {
  const auto bytes = encode_checkpoint(head);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::unique_ptr<Head<float>> load_checkpoint(const std::filesystem::path& path) {
  return decode(read_file(path), path.string()).head;
}

Matrix<float> load_packed_prototypes(const std::filesystem::path& path) {
  auto d = decode(read_file(path), path.string());
  if (d.head->kind() != HeadKind::protobin) {
    throw FormatError(path.string() + ": only protobin checkpoints carry packed prototypes");
  }
  return unpack_prototypes(d.packed, d.packed_count, d.packed_dim);
}

}  // namespace protoprobe
