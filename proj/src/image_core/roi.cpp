#include "esrie/roi.hpp"

#include <fstream>
#include <sstream>

#include "esrie/error.hpp"

namespace esrie {

std::string_view to_string(RoiKind kind) {
  switch (kind) {
    case RoiKind::Region: return "region";
    case RoiKind::LateralProfile: return "lateral";
    case RoiKind::AxialProfile: return "axial";
  }
  return "?";
}

RoiKind parse_roi_kind(std::string_view text) {
  if (text == "region") return RoiKind::Region;
  if (text == "lateral") return RoiKind::LateralProfile;
  if (text == "axial") return RoiKind::AxialProfile;
  throw Error(ErrorCode::InvalidRoi, "unknown ROI kind '" + std::string(text) + "'");
}

void RoiSpec::validate(const Image& img) const {
  if (x0 < 0 || z0 < 0 || x0 >= x1 || z0 >= z1 || x1 > img.width() || z1 > img.height())
    throw Error(ErrorCode::InvalidRoi, "ROI '" + name + "' does not fit the image");
  if (kind == RoiKind::LateralProfile && height() != 1)
    throw Error(ErrorCode::InvalidRoi, "lateral profile '" + name + "' must be one row thick");
  if (kind == RoiKind::AxialProfile && width() != 1)
    throw Error(ErrorCode::InvalidRoi, "axial profile '" + name + "' must be one column thick");
}

std::vector<double> roi_values(const Image& img, const RoiSpec& roi) {
  roi.validate(img);
  std::vector<double> out;
  out.reserve(roi.count());
  for (int z = roi.z0; z < roi.z1; ++z)
    for (int x = roi.x0; x < roi.x1; ++x) out.push_back(img.at(x, z));
  return out;
}

std::vector<RoiSpec> parse_roi_text(std::string_view text) {
  std::vector<RoiSpec> rois;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    RoiSpec roi;
    std::string kind;
    if (!(fields >> roi.name)) continue;
    if (!(fields >> kind >> roi.x0 >> roi.z0 >> roi.x1 >> roi.z1))
      throw Error(ErrorCode::InvalidRoi, "ROI line " + std::to_string(line_no) + ": expected `name kind x0 z0 x1 z1`");
    roi.kind = parse_roi_kind(kind);
    rois.push_back(std::move(roi));
  }
  return rois;
}

std::vector<RoiSpec> read_roi_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open ROI file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_roi_text(buffer.str());
}

void write_roi_file(const std::vector<RoiSpec>& rois, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write ROI file " + path.string());
  for (const auto& r : rois)
    out << r.name << ' ' << to_string(r.kind) << ' ' << r.x0 << ' ' << r.z0 << ' ' << r.x1 << ' ' << r.z1 << '\n';
}

const RoiSpec* find_roi(const std::vector<RoiSpec>& rois, std::string_view name) {
  for (const auto& r : rois)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace esrie
