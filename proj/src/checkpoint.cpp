#include "evc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace evc {

namespace {
constexpr char kMagic[4] = {'E', 'V', 'C', 'K'};
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.insert(out_.end(), s.begin(), s.end());
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (n > in_.size() - pos_) {
    throw DataError("checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                    " more)");
  }
  auto s = in_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint32_t ByteReader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  auto b = take(n);
  return std::string(b.begin(), b.end());
}

void write_config(ByteWriter& w, const ModelConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.num_stages));
  w.u32(static_cast<std::uint32_t>(cfg.latent_channels));
  w.u32(static_cast<std::uint32_t>(cfg.hyper_channels));
  w.u32(static_cast<std::uint32_t>(cfg.rate_count));
  w.f64(cfg.negative_slope);
  for (int v : cfg.encoder.widths) w.u32(static_cast<std::uint32_t>(v));
  for (int v : cfg.decoder.widths) w.u32(static_cast<std::uint32_t>(v));
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.num_stages = static_cast<int>(r.u32());
  c.latent_channels = static_cast<int>(r.u32());
  c.hyper_channels = static_cast<int>(r.u32());
  c.rate_count = static_cast<int>(r.u32());
  c.negative_slope = r.f64();
  for (int& v : c.encoder.widths) v = static_cast<int>(r.u32());
  for (int& v : c.decoder.widths) v = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

template <typename T>
void write_blobs(ByteWriter& w, const std::vector<Var<T>>& params) {
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    const Shape& s = p->value.shape();
    for (int d : {s.n(), s.c(), s.h(), s.w()}) w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(p->value.size()));
    for (T v : p->value.values()) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

template <typename T>
void read_blobs(ByteReader& r, const std::vector<Var<T>>& params) {
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (const auto& p : params) {
    int d[4];
    for (int& e : d) {
      const std::uint32_t v = r.u32();
      if (v == 0 || v > (1u << 20)) throw DataError("checkpoint tensor extent out of range at byte " + std::to_string(r.offset()));
      e = static_cast<int>(v);
    }
    const Shape shape(d[0], d[1], d[2], d[3]);
    const std::uint32_t len = r.u32();
    if (len != shape.numel() || len > (1u << 28)) throw DataError("checkpoint blob length disagrees with its shape at byte " + std::to_string(r.offset()));
    TensorT<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(std::bit_cast<float>(r.u32()));
    p->value = std::move(t);
    p->zero_grad();
  }
}

template <typename T>
void repair_groups(Network<T>& net) {
  for (auto& st : net.stages) st.dc.dw.spec.groups = st.dc.dw.weight->value.n();
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const CodecModel<T>& model) {
  if (model.encoder.masked() || model.decoder.masked()) {
    throw SequencingError("checkpoint: merge the masks before saving");
  }
  ByteWriter w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  w.u32(kCheckpointVersion);
  ModelConfig cfg = model.config;
  cfg.encoder = model.encoder.scheme();
  cfg.decoder = model.decoder.scheme();
  for (int i = cfg.num_stages; i < 4; ++i) cfg.encoder.widths[i] = cfg.decoder.widths[i] = 1;
  write_config(w, cfg);
  write_blobs(w, model.params());
  return std::move(w.buffer());
}

template <typename T>
CodecModel<T> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("not a model checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const ModelConfig cfg = read_config(r);
  CodecModel<T> m = build_model<T>(cfg, 0);
  read_blobs(r, m.params());
  if (!r.done()) throw DataError("trailing bytes after checkpoint at offset " + std::to_string(r.offset()));
  repair_groups(m.encoder);
  repair_groups(m.decoder);
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for " + path.string());
}

template <typename T>
void save_checkpoint(const CodecModel<T>& model, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(model));
}

template <typename T>
CodecModel<T> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<T>(read_file(path));
}

#define EVC_INSTANTIATE(T)                                                               \
  template void write_blobs(ByteWriter&, const std::vector<Var<T>>&);                   \
  template void read_blobs(ByteReader&, const std::vector<Var<T>>&);                    \
  template void repair_groups(Network<T>&);                                              \
  template std::vector<std::uint8_t> serialize_checkpoint(const CodecModel<T>&);        \
  template CodecModel<T> parse_checkpoint<T>(std::span<const std::uint8_t>);            \
  template void save_checkpoint(const CodecModel<T>&, const std::filesystem::path&);    \
  template CodecModel<T> load_checkpoint<T>(const std::filesystem::path&);

EVC_INSTANTIATE(float)
EVC_INSTANTIATE(double)
#undef EVC_INSTANTIATE

}  // namespace evc
