#include "xplain/csv.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xplain/errors.hpp"

namespace xplain::csv {

std::string escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += escape(fields[i]);
  }
  return out;
}

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw ParseError("csv: missing column '" + std::string(name) + "'");
}

Table parse(std::string_view content) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, in_field = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < content.size(); ++i) {
    const char c = content[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = in_field = true;
    } else if (c == ',') {
      rec.push_back(std::move(field));
      field.clear();
      in_field = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') ++i;
      rec.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(rec));
      rec.clear();
      in_field = false;
      ++line;
    } else {
      field += c;
      in_field = true;
    }
  }
  if (quoted) throw ParseError("csv: unterminated quoted field near line " + std::to_string(line));
  if (in_field || !field.empty()) {
    rec.push_back(std::move(field));
    records.push_back(std::move(rec));
  }

  Table t;
  if (records.empty()) return t;
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size())
      throw ParseError("csv: row " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                       " fields, expected " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

Table read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Writer::Writer(std::vector<std::string> header) : width_(header.size()), out_(join(header) + '\n') {}

void Writer::row(const std::vector<std::string>& fields) {
  if (fields.size() != width_) throw std::logic_error("csv row width mismatch");
  out_ += join(fields);
  out_ += '\n';
}

void Writer::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << out_;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace xplain::csv
