#include "esrie/image_io.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "esrie/bytes.hpp"
#include "esrie/error.hpp"
#include "esrie/rounding.hpp"

namespace esrie {
namespace {

constexpr std::string_view kRawMagic = "ESRI1";

std::string format_spacing(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::vector<std::uint8_t> encode_pgm(const Image& img) {
  std::string header = "P5\n# dx=" + format_spacing(img.dx()) + " dz=" + format_spacing(img.dz()) + "\n" +
                       std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (float v : img.data()) out.push_back(static_cast<std::uint8_t>(clamp_display(round_half_away(v))));
  return out;
}

std::vector<std::uint8_t> encode_raw(const Image& img) {
  ByteWriter w;
  w.put_bytes(kRawMagic);
  w.put_u32(static_cast<std::uint32_t>(img.width()));
  w.put_u32(static_cast<std::uint32_t>(img.height()));
  w.put_u8(static_cast<std::uint8_t>(img.domain()));
  w.put_f32(img.dx());
  w.put_f32(img.dz());
  w.put_array(img.data());
  return std::move(w.buffer());
}

// Reads one whitespace-delimited PGM header token, skipping `#` comments.
// Spacing metadata is picked up from comments of the form `dx=.. dz=..`.
class PgmHeaderReader {
 public:
  explicit PgmHeaderReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::string token() {
    for (;;) {
      if (pos_ >= bytes_.size()) throw Error(ErrorCode::TruncatedFile, "PGM header ended early");
      const char c = static_cast<char>(bytes_[pos_]);
      if (c == '#') {
        std::string comment;
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') comment.push_back(static_cast<char>(bytes_[pos_++]));
        parse_comment(comment);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      tok.push_back(static_cast<char>(bytes_[pos_++]));
    return tok;
  }

  int integer() {
    const std::string tok = token();
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw Error(ErrorCode::InvalidImage, "malformed PGM header field '" + tok + "'");
    return std::stoi(tok);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size()) throw Error(ErrorCode::TruncatedFile, "PGM raster missing");
    return pos_ + 1;
  }

  float dx = Image::kDefaultSpacingMm;
  float dz = Image::kDefaultSpacingMm;

 private:
  void parse_comment(const std::string& comment) {
    std::istringstream in(comment.substr(1));
    std::string field;
    while (in >> field) {
      if (field.rfind("dx=", 0) == 0) dx = std::stof(field.substr(3));
      if (field.rfind("dz=", 0) == 0) dz = std::stof(field.substr(3));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Image decode_pgm(std::span<const std::uint8_t> bytes) {
  PgmHeaderReader hdr(bytes);
  if (hdr.token() != "P5") throw Error(ErrorCode::BadMagic, "not a binary PGM");
  const int width = hdr.integer();
  const int height = hdr.integer();
  const int maxval = hdr.integer();
  if (maxval != 255) throw Error(ErrorCode::UnsupportedMaxval, "PGM maxval " + std::to_string(maxval) + " (need 255)");
  if (width < 1 || height < 1) throw Error(ErrorCode::InvalidImage, "PGM extents must be >= 1");
  const std::size_t offset = hdr.raster_offset();
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (bytes.size() < offset + n) throw Error(ErrorCode::TruncatedFile, "PGM raster shorter than width*height");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = bytes[offset + i];
  Image img(width, height, Domain::Display8, std::move(data));
  img.set_spacing(hdr.dx, hdr.dz);
  return img;
}

Image decode_raw(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(kRawMagic.size()) != kRawMagic) throw Error(ErrorCode::BadMagic, "not an ESRI1 file");
  const auto width = r.get_u32();
  const auto height = r.get_u32();
  const auto tag = r.get_u8();
  if (tag > static_cast<std::uint8_t>(Domain::Display8)) throw Error(ErrorCode::InvalidImage, "unknown domain tag");
  const float dx = r.get_f32();
  const float dz = r.get_f32();
  if (width == 0 || height == 0 || width > (1u << 20) || height > (1u << 20))
    throw Error(ErrorCode::InvalidImage, "raw image extents out of range");
  std::vector<float> data(static_cast<std::size_t>(width) * height);
  r.get_array(std::span<float>(data));
  Image img(static_cast<int>(width), static_cast<int>(height), static_cast<Domain>(tag), std::move(data));
  img.set_spacing(dx, dz);
  return img;
}

}  // namespace

std::vector<std::uint8_t> encode_image(const Image& img) {
  return img.domain() == Domain::Display8 ? encode_pgm(img) : encode_raw(img);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes);
  if (bytes.size() < kRawMagic.size()) {
    // Too short to hold either magic; report a truncated raw file when the
    // bytes seen so far are a prefix of the raw magic.
    if (std::equal(bytes.begin(), bytes.end(), kRawMagic.begin())) throw Error(ErrorCode::TruncatedFile, "file too short");
    throw Error(ErrorCode::BadMagic, "unrecognized image format");
  }
  return decode_raw(bytes);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_image(const Image& img, const std::filesystem::path& path) { write_file_bytes(path, encode_image(img)); }

Image read_image(const std::filesystem::path& path) { return decode_image(read_file_bytes(path)); }

}  // namespace esrie
