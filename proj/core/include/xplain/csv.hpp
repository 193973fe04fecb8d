#pragma once

// RFC-4180 CSV: comma separated, CRLF-free (LF line ends), fields quoted only
// when they contain a comma, quote, CR or LF.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace xplain::csv {

std::string escape(std::string_view field);
std::string join(const std::vector<std::string>& fields);
/// Shortest round-trip text for a double ("%.17g"); NaN is written as "nan".
std::string number(double v);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws ParseError when missing.
  std::size_t column(std::string_view name) const;
};

/// Throws ParseError on an unterminated quote or a row of the wrong width.
Table parse(std::string_view content);
Table read(const std::filesystem::path& path);

/// Builds a file in memory; write() emits it in one go.
class Writer {
 public:
  explicit Writer(std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);
  const std::string& str() const { return out_; }
  void write(const std::filesystem::path& path) const;

 private:
  std::size_t width_;
  std::string out_;
};

}  // namespace xplain::csv
