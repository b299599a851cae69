#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace esrie::metrics {

/// One row of an evaluation table: the five image-quality metrics for one
/// method applied to one image, plus provenance.
struct MetricReport {
  std::string image_id;
  std::string method;
  std::string domain = "display8";
  std::string background_roi;
  std::string cyst_roi;
  std::string profile_roi;
  double cnr = 0.0;
  double ssnr = 0.0;
  double enl = 0.0;
  double agm = 0.0;
  double ssim = 0.0;
  std::optional<std::uint64_t> params;
  std::optional<double> mflops;
  std::optional<double> fps;
};

/// Fixed-width text table with one row per report, methods down the side.
std::string render_table(const std::vector<MetricReport>& rows);

/// `key=value` records, one report per line.
std::string render_records(const std::vector<MetricReport>& rows);

/// Comma-separated values with a header line.
std::string render_csv(const std::vector<MetricReport>& rows);

}  // namespace esrie::metrics
