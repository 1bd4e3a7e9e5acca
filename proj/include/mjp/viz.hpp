#pragma once

// Minimal binary PPM (P6) line plots for the sweep report: mean P and mean
// cost against prune ratio, predictor in blue, random baseline in red.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/bytes.hpp"
#include "mjp/error.hpp"

namespace mjp {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage(int w, int h, Rgb fill) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + i);
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    std::copy(c.begin(), c.end(), pixels.begin() + i);
  }
};

inline std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

namespace detail {

inline void draw_line(RgbImage& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    for (int t = -1; t <= 1; ++t) {
      img.set(x0 + t, y0, c);
      img.set(x0, y0 + t, c);
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline void draw_marker(RgbImage& img, int x, int y, Rgb c) {
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) img.set(x + dx, y + dy, c);
}

}  // namespace detail

struct Series {
  std::vector<double> y;
  Rgb color;
};

/// Line plot over shared x values. Gray gridlines mark 10% steps of each axis range.
inline RgbImage line_plot(const std::vector<double>& x, const std::vector<Series>& series, int width = 480,
                          int height = 320) {
  if (x.empty()) throw std::invalid_argument("line_plot: no points");
  RgbImage img(width, height, {255, 255, 255});
  const int left = 40, right = width - 20, top = 20, bottom = height - 40;
  double x_lo = *std::min_element(x.begin(), x.end()), x_hi = *std::max_element(x.begin(), x.end());
  double y_lo = 1e300, y_hi = -1e300;
  for (const auto& s : series) {
    if (s.y.size() != x.size()) throw DimensionError("line_plot: series length differs from x");
    for (double v : s.y) {
      y_lo = std::min(y_lo, v);
      y_hi = std::max(y_hi, v);
    }
  }
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  if (y_hi == y_lo) y_hi = y_lo + 1.0;
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double v) { return left + static_cast<int>(std::lround((v - x_lo) / (x_hi - x_lo) * (right - left))); };
  auto py = [&](double v) { return bottom - static_cast<int>(std::lround((v - y_lo) / (y_hi - y_lo) * (bottom - top))); };

  for (int k = 0; k <= 10; ++k) {
    const int gx = left + (right - left) * k / 10;
    const int gy = top + (bottom - top) * k / 10;
    for (int y = top; y <= bottom; ++y) img.set(gx, y, {225, 225, 225});
    for (int xx = left; xx <= right; ++xx) img.set(xx, gy, {225, 225, 225});
  }
  for (int y = top; y <= bottom; ++y) img.set(left, y, {0, 0, 0});
  for (int xx = left; xx <= right; ++xx) img.set(xx, bottom, {0, 0, 0});

  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < x.size(); ++i)
      detail::draw_line(img, px(x[i]), py(s.y[i]), px(x[i + 1]), py(s.y[i + 1]), s.color);
    for (std::size_t i = 0; i < x.size(); ++i) detail::draw_marker(img, px(x[i]), py(s.y[i]), s.color);
  }
  return img;
}

inline constexpr Rgb kPredictorColor{31, 119, 180};
inline constexpr Rgb kRandomColor{214, 39, 40};

/// Writes p_vs_ratio.ppm and cost_vs_ratio.ppm from a sweep report JSON.
inline void plot_report(const nlohmann::json& report, const std::filesystem::path& out_dir) {
  std::vector<double> r, p_pred, p_rand, c_pred, c_rand;
  try {
    for (const auto& e : report.at("sweep")) {
      r.push_back(e.at("ratio").get<double>());
      p_pred.push_back(e.at("predictor").at("mean_p").get<double>());
      p_rand.push_back(e.at("random").at("mean_p").get<double>());
      c_pred.push_back(e.at("predictor").at("mean_cost").get<double>());
      c_rand.push_back(e.at("random").at("mean_cost").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("report: ") + e.what());
  }
  if (r.empty()) throw Error(ErrorKind::data, "report: empty sweep");
  std::filesystem::create_directories(out_dir);
  bytes::write_file(out_dir / "p_vs_ratio.ppm",
                    encode_ppm(line_plot(r, {{p_pred, kPredictorColor}, {p_rand, kRandomColor}})));
  bytes::write_file(out_dir / "cost_vs_ratio.ppm",
                    encode_ppm(line_plot(r, {{c_pred, kPredictorColor}, {c_rand, kRandomColor}})));
}

}  // namespace mjp
