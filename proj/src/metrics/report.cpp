#include "esrie/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace esrie::metrics {
namespace {

std::string fixed(double v, int decimals) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string opt_u64(const std::optional<std::uint64_t>& v) { return v ? std::to_string(*v) : "-"; }
std::string opt_f(const std::optional<double>& v, int decimals) { return v ? fixed(*v, decimals) : "-"; }

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}
std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string render_table(const std::vector<MetricReport>& rows) {
  const std::vector<std::string> header = {"Method", "CNR", "SSNR", "ENL", "AGM", "SSIM", "Params", "MFLOPs", "FPS"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows)
    cells.push_back({r.method, fixed(r.cnr, 2), fixed(r.ssnr, 2), fixed(r.enl, 2), fixed(r.agm, 2), fixed(r.ssim, 2),
                     opt_u64(r.params), opt_f(r.mflops, 2), opt_f(r.fps, 2)});

  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }

  auto line = [&](const std::vector<std::string>& row) {
    std::string out = pad_right(row[0], width[0]);
    for (std::size_t c = 1; c < row.size(); ++c) out += "  " + pad_left(row[c], width[c]);
    return out + "\n";
  };
  std::size_t total = width[0];
  for (std::size_t c = 1; c < width.size(); ++c) total += 2 + width[c];

  std::string out;
  if (!rows.empty()) {
    out += "# image: " + rows.front().image_id + "  domain: " + rows.front().domain + "  R_B: " +
           rows.front().background_roi + "  R_C: " + rows.front().cyst_roi + "  profile: " + rows.front().profile_roi +
           "\n";
  }
  out += line(header);
  out += std::string(total, '-') + "\n";
  for (const auto& row : cells) out += line(row);
  return out;
}

std::string render_records(const std::vector<MetricReport>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += "image=" + r.image_id + " method=" + r.method + " domain=" + r.domain + " background=" + r.background_roi +
           " cyst=" + r.cyst_roi + " profile=" + r.profile_roi + " cnr=" + fixed(r.cnr, 6) +
           " ssnr=" + fixed(r.ssnr, 6) + " enl=" + fixed(r.enl, 6) + " agm=" + fixed(r.agm, 6) +
           " ssim=" + fixed(r.ssim, 6) + " params=" + opt_u64(r.params) + " mflops=" + opt_f(r.mflops, 3) +
           " fps=" + opt_f(r.fps, 3) + "\n";
  }
  return out;
}

std::string render_csv(const std::vector<MetricReport>& rows) {
  std::string out = "image,method,domain,cnr,ssnr,enl,agm,ssim,params,mflops,fps\n";
  for (const auto& r : rows) {
    out += r.image_id + "," + r.method + "," + r.domain + "," + fixed(r.cnr, 6) + "," + fixed(r.ssnr, 6) + "," +
           fixed(r.enl, 6) + "," + fixed(r.agm, 6) + "," + fixed(r.ssim, 6) + "," + (r.params ? std::to_string(*r.params) : "") +
           "," + (r.mflops ? fixed(*r.mflops, 3) : "") + "," + (r.fps ? fixed(*r.fps, 3) : "") + "\n";
  }
  return out;
}

}  // namespace esrie::metrics
