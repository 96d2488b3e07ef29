#include "fd/io_util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fd {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  FD_CHECK(in.good(), "cannot open file: " + path);
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  FD_CHECK(out.good(), "cannot open file for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  FD_CHECK(out.good(), "write failed: " + path);
}

std::vector<unsigned char> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  FD_CHECK(in.good(), "cannot open file: " + path);
  std::vector<unsigned char> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
  FD_CHECK(columns_ > 0, "csv: empty header");
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) text_ += ',';
    text_ += header[i];
  }
  text_ += '\n';
}

void CsvWriter::add_row(const std::vector<std::string>& cells) {
  FD_CHECK(cells.size() == columns_, "csv: row width does not match header");
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) text_ += ',';
    text_ += cells[i];
  }
  text_ += '\n';
}

void CsvWriter::save(const std::string& path) const { write_text_file(path, text_); }

void write_pgm(const std::string& path, const std::vector<double>& values, int height, int width) {
  FD_CHECK(height > 0 && width > 0 && values.size() == static_cast<size_t>(height) * static_cast<size_t>(width),
           "pgm: size mismatch");
  double mx = 0.0;
  for (double v : values) mx = std::max(mx, v);
  if (mx <= 0.0) mx = 1.0;
  std::string out = "P2\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (x) out += ' ';
      int g = static_cast<int>(std::lround(255.0 * values[static_cast<size_t>(y) * width + x] / mx));
      out += std::to_string(std::clamp(g, 0, 255));
    }
    out += '\n';
  }
  write_text_file(path, out);
}

namespace {

std::string heat_color(double t) {
  // Three-stop ramp, dark to bright.
  struct Stop {
    double r, g, b;
  };
  const Stop lo{0.0, 0.0, 0.06}, mid{0.71, 0.21, 0.47}, hi{0.99, 0.99, 0.75};
  t = std::clamp(t, 0.0, 1.0);
  Stop a = t < 0.5 ? lo : mid;
  Stop b = t < 0.5 ? mid : hi;
  double u = t < 0.5 ? t * 2.0 : (t - 0.5) * 2.0;
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(std::lround(255 * (a.r + (b.r - a.r) * u))),
                static_cast<int>(std::lround(255 * (a.g + (b.g - a.g) * u))),
                static_cast<int>(std::lround(255 * (a.b + (b.b - a.b) * u))));
  return buf;
}

}  // namespace

std::string svg_heatmap_grid(const std::vector<std::vector<double>>& maps,
                             const std::vector<std::string>& labels, int side, int panels_per_row) {
  FD_CHECK(!maps.empty() && maps.size() == labels.size(), "svg: maps/labels mismatch");
  FD_CHECK(side > 0 && panels_per_row > 0, "svg: bad layout");
  for (const auto& m : maps)
    FD_CHECK(m.size() == static_cast<size_t>(side) * static_cast<size_t>(side), "svg: map size mismatch");
  const int cell = std::max(1, 160 / side);
  const int panel = side * cell;
  const int pad = 14, label_h = 14;
  const int cols = std::min<int>(panels_per_row, static_cast<int>(maps.size()));
  const int rows = (static_cast<int>(maps.size()) + cols - 1) / cols;
  const int w = cols * (panel + pad) + pad;
  const int h = rows * (panel + pad + label_h) + pad;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
                    std::to_string(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t p = 0; p < maps.size(); ++p) {
    const int px = pad + static_cast<int>(p % static_cast<size_t>(cols)) * (panel + pad);
    const int py = pad + static_cast<int>(p / static_cast<size_t>(cols)) * (panel + pad + label_h) + label_h;
    double mx = 0.0;
    for (double v : maps[p]) mx = std::max(mx, v);
    if (mx <= 0.0) mx = 1.0;
    svg += "<text x=\"" + std::to_string(px) + "\" y=\"" + std::to_string(py - 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + labels[p] + "</text>\n";
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double v = maps[p][static_cast<size_t>(y) * side + x] / mx;
        svg += "<rect x=\"" + std::to_string(px + x * cell) + "\" y=\"" + std::to_string(py + y * cell) +
               "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" +
               heat_color(v) + "\"/>\n";
      }
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace fd
