#include "nxn/csv.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "nxn/errors.hpp"

namespace nxn {

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary | std::ios::trunc), columns_(header.size()) {
  if (!out_) throw InvalidInput("cannot open '" + path + "' for writing");
  row(header);
}

std::string CsvWriter::quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string q = "\"";
  for (char c : field) {
    if (c == '"') q += '"';
    q += c;
  }
  q += '"';
  return q;
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) throw InvalidInput("CsvWriter: wrong number of fields");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) out_ << ',';
    out_ << quote(fields[i]);
  }
  out_ << "\r\n";
  out_.flush();
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt(std::size_t v) { return std::to_string(v); }

void write_pgm(const std::string& path, std::span<const double> img, std::size_t height,
               std::size_t width, double lo, double hi) {
  require_size(img.size(), height * width, "write_pgm");
  if (!(hi > lo)) throw InvalidInput("write_pgm: need hi > lo");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidInput("cannot open '" + path + "' for writing");
  f << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : img) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
}

}  // namespace nxn
