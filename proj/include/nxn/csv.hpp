#pragma once

#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace nxn {

// RFC-4180 writer: CRLF line ends, fields quoted when they contain a comma,
// quote, CR or LF.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  static std::string quote(const std::string& field);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

// Shortest round-trip decimal form; "inf", "-inf", "nan" for non-finite values.
std::string fmt(double v);
std::string fmt(std::size_t v);

// 8-bit binary PGM, values mapped linearly from [lo, hi] and clamped.
void write_pgm(const std::string& path, std::span<const double> img, std::size_t height,
               std::size_t width, double lo = 0.0, double hi = 1.0);

}  // namespace nxn
