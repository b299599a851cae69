#include <zlib.h>

#include <algorithm>
#include <cmath>

#include "esrie/bytes.hpp"
#include "esrie/error.hpp"
#include "esrie/image_io.hpp"
#include "esrie/network.hpp"

namespace esrie::net {

namespace {

constexpr std::string_view kMagic = "ESNN1";

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; checkpoints are far below 4 GiB.
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

void put_descriptor(ByteWriter& w, const BranchDescriptor& d) {
  w.put_u32(static_cast<std::uint32_t>(d.layers.size()));
  for (const auto& l : d.layers) {
    w.put_u8(static_cast<std::uint8_t>(l.kind));
    for (auto e : l.extents) w.put_u32(e);
  }
}

BranchDescriptor get_descriptor(ByteReader& r) {
  BranchDescriptor d;
  const std::uint32_t count = r.get_u32();
  if (count > r.remaining() / 17) throw Error(ErrorCode::TruncatedFile, "layer count exceeds file size");
  d.layers.resize(count);
  for (auto& l : d.layers) {
    const std::uint8_t kind = r.get_u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::Output))
      throw Error(ErrorCode::DescriptorMismatch, "unknown layer kind " + std::to_string(kind));
    l.kind = static_cast<LayerKind>(kind);
    for (auto& e : l.extents) e = r.get_u32();
  }
  d.validate();
  return d;
}

void put_float_payload(ByteWriter& w, const BranchParams<float>& p) {
  for (const auto& l : p.layers) {
    w.put_array<float>(l.weight.span());
    w.put_array<float>(l.bias);
  }
}

void get_float_payload(ByteReader& r, BranchParams<float>& p) {
  for (auto& l : p.layers) {
    r.get_array<float>(l.weight.span());
    r.get_array<float>(l.bias);
  }
}

void put_int8_payload(ByteWriter& w, const BranchParams<float>& p, const BranchQuant& q) {
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    w.put_f32(q.weights[k].scale);
    w.put_array<std::int8_t>(q.weights[k].q);
    w.put_array<float>(p.layers[k].bias);
  }
}

void get_int8_payload(ByteReader& r, BranchParams<float>& p, BranchQuant& q) {
  q.weights.resize(p.layers.size());
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    auto& t = q.weights[k];
    t.scale = r.get_f32();
    if (!(t.scale > 0.0f) || !std::isfinite(t.scale)) throw Error(ErrorCode::NonFiniteWeights, "invalid weight scale");
    t.q.resize(p.layers[k].weight.size());
    r.get_array<std::int8_t>(t.q);
    r.get_array<float>(p.layers[k].bias);
    const auto deq = quant::dequantize(t);
    std::copy(deq.begin(), deq.end(), p.layers[k].weight.storage().begin());
  }
}

void put_activations(ByteWriter& w, const BranchQuant& q) {
  for (const auto& a : q.activations) {
    w.put_f32(a.scale);
    w.put_i32(a.zero_point);
  }
}

void get_activations(ByteReader& r, BranchQuant& q, std::size_t layers) {
  q.activations.resize(layers);
  for (auto& a : q.activations) {
    a.scale = r.get_f32();
    a.zero_point = r.get_i32();
    if (!(a.scale > 0.0f) || !std::isfinite(a.scale) || a.zero_point < 0 || a.zero_point > 255)
      throw Error(ErrorCode::MissingQuantParams, "invalid activation quantization record");
  }
}

void check_branch(const BranchDescriptor& d, const BranchParams<float>& p, const std::optional<BranchQuant>& q,
                  bool int8) {
  if (p.layers.size() != d.param_layer_count()) throw Error(ErrorCode::DescriptorMismatch, "parameters do not match descriptor");
  if (!int8) return;
  if (!q || q->weights.size() != p.layers.size() || q->activations.size() != d.layers.size())
    throw Error(ErrorCode::MissingQuantParams, "int8 model lacks quantization parameters");
}

}  // namespace

std::vector<std::uint8_t> encode_model(const Model& m) {
  const bool int8 = m.precision == Precision::Int8Quantized;
  check_branch(m.descriptor.despeckle, m.despeckle, m.despeckle_quant, int8);
  check_branch(m.descriptor.deblur, m.deblur, m.deblur_quant, int8);

  ByteWriter w;
  w.put_bytes(kMagic);
  w.put_u16(kCheckpointVersion);
  w.put_u8(static_cast<std::uint8_t>(m.precision));
  w.put_u8(m.fused ? 1 : 0);
  put_descriptor(w, m.descriptor.despeckle);
  put_descriptor(w, m.descriptor.deblur);
  if (int8) {
    put_activations(w, *m.despeckle_quant);
    put_activations(w, *m.deblur_quant);
    put_int8_payload(w, m.despeckle, *m.despeckle_quant);
    put_int8_payload(w, m.deblur, *m.deblur_quant);
  } else {
    put_float_payload(w, m.despeckle);
    put_float_payload(w, m.deblur);
  }
  const std::uint32_t crc = crc32_of(w.buffer());
  w.put_u32(crc);
  return std::move(w.buffer());
}

Model decode_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size()) {
    const bool prefix = std::equal(bytes.begin(), bytes.end(), kMagic.begin());
    throw Error(prefix ? ErrorCode::TruncatedFile : ErrorCode::BadMagic, "not a model checkpoint");
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw Error(ErrorCode::BadMagic, "not a model checkpoint");
  ByteReader header(bytes.subspan(kMagic.size()));
  const std::uint16_t version = header.get_u16();
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + " is not supported");
  if (bytes.size() < kMagic.size() + 2 + 4) throw Error(ErrorCode::TruncatedFile, "checkpoint too short");

  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.get_u32()) throw Error(ErrorCode::ChecksumError, "checkpoint CRC32 mismatch");

  ByteReader r(body.subspan(kMagic.size() + 2));
  Model m;
  const std::uint8_t precision = r.get_u8();
  if (precision > 1) throw Error(ErrorCode::DescriptorMismatch, "unknown precision tag");
  m.precision = static_cast<Precision>(precision);
  m.fused = r.get_u8() != 0;
  m.descriptor.despeckle = get_descriptor(r);
  m.descriptor.deblur = get_descriptor(r);
  m.despeckle = zero_params<float>(m.descriptor.despeckle);
  m.deblur = zero_params<float>(m.descriptor.deblur);
  if (m.precision == Precision::Int8Quantized) {
    m.despeckle_quant.emplace();
    m.deblur_quant.emplace();
    get_activations(r, *m.despeckle_quant, m.descriptor.despeckle.layers.size());
    get_activations(r, *m.deblur_quant, m.descriptor.deblur.layers.size());
    get_int8_payload(r, m.despeckle, *m.despeckle_quant);
    get_int8_payload(r, m.deblur, *m.deblur_quant);
  } else {
    get_float_payload(r, m.despeckle);
    get_float_payload(r, m.deblur);
  }
  if (r.remaining() != 0) throw Error(ErrorCode::DescriptorMismatch, "trailing bytes after payload");
  for (const auto* p : {&m.despeckle, &m.deblur})
    for (const auto& l : p->layers) {
      for (float v : l.weight.storage())
        if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteWeights, "checkpoint holds NaN/Inf weights");
      for (float v : l.bias)
        if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteWeights, "checkpoint holds NaN/Inf biases");
    }
  return m;
}

void save(const Model& m, const std::filesystem::path& path) { write_file_bytes(path, encode_model(m)); }

Model load(const std::filesystem::path& path) { return decode_model(read_file_bytes(path)); }

std::size_t weight_payload_bytes(const Model& m) {
  const std::size_t elem = m.precision == Precision::Int8Quantized ? 1 : 4;
  std::size_t n = 0;
  for (const auto* p : {&m.despeckle, &m.deblur})
    for (const auto& l : p->layers) n += l.weight.size() * elem;
  return n;
}

}  // namespace esrie::net
