#ifndef RFPROBE_REPORT_HPP
#define RFPROBE_REPORT_HPP

#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/probes.hpp"

namespace rfprobe {

namespace detail {

inline void dump_into(const nlohmann::json& j, std::string& out, int indent, int depth) {
  const std::string pad = indent > 0 ? std::string(static_cast<std::size_t>(indent * (depth + 1)), ' ') : "";
  const std::string close = indent > 0 ? std::string(static_cast<std::size_t>(indent * depth), ' ') : "";
  const char* nl = indent > 0 ? "\n" : "";
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{";
      out += nl;
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) {
          out += ",";
          out += nl;
        }
        first = false;
        out += pad;
        out += nlohmann::json(it.key()).dump();
        out += indent > 0 ? ": " : ":";
        dump_into(it.value(), out, indent, depth + 1);
      }
      out += nl;
      out += close;
      out += "}";
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[";
      out += nl;
      for (std::size_t k = 0; k < j.size(); ++k) {
        if (k) {
          out += ",";
          out += nl;
        }
        out += pad;
        dump_into(j[k], out, indent, depth + 1);
      }
      out += nl;
      out += close;
      out += "]";
      return;
    }
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      out += std::isfinite(v) ? format_double(v) : "null";
      return;
    }
    default:
      out += j.dump();
  }
}

}  // namespace detail

// JSON text with every floating-point value printed to 17 significant digits. Object keys keep
// nlohmann's sorted order, so equal documents serialize to equal bytes.
inline std::string dump_json(const nlohmann::json& j, int indent = 2) {
  std::string out;
  detail::dump_into(j, out, indent, 0);
  out += "\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot write " + path);
  f << text;
  if (!f) throw Error(ErrorKind::io, "write failed for " + path);
}

}  // namespace rfprobe

#endif  // RFPROBE_REPORT_HPP
