#pragma once

#include <string>
#include <vector>

#include "fd/common.hpp"

namespace fd {

// Shortest round-trip decimal form, locale-free ('.' decimal point always).
std::string format_number(double v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::vector<unsigned char> read_binary_file(const std::string& path);

// Comma-separated, header row, LF line endings.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void add_row(const std::vector<std::string>& cells);
  const std::string& text() const { return text_; }
  void save(const std::string& path) const;

 private:
  size_t columns_;
  std::string text_;
};

// ASCII PGM (P2), values scaled so the map maximum lands on 255.
void write_pgm(const std::string& path, const std::vector<double>& values, int height, int width);

// Grid of square heat maps rendered as SVG, panels laid out in raster order
// with one label per panel.
std::string svg_heatmap_grid(const std::vector<std::vector<double>>& maps,
                             const std::vector<std::string>& labels, int side, int panels_per_row);

}  // namespace fd
