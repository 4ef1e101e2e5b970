#include "metagpt/json_io.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace metagpt {
namespace {

void emit(std::ostream& out, const Json& value, int indent, int depth) {
  const auto newline = [&](int level) {
    if (indent < 0) return;
    out << '\n' << std::string(static_cast<std::size_t>(indent * level), ' ');
  };
  switch (value.type()) {
    case Json::value_t::object: {
      if (value.empty()) {
        out << "{}";
        return;
      }
      out << '{';
      bool first = true;
      for (const auto& [key, item] : value.items()) {
        if (!first) out << ',';
        first = false;
        newline(depth + 1);
        out << Json(key).dump() << (indent < 0 ? ":" : ": ");
        emit(out, item, indent, depth + 1);
      }
      newline(depth);
      out << '}';
      return;
    }
    case Json::value_t::array: {
      if (value.empty()) {
        out << "[]";
        return;
      }
      // Arrays of scalars stay on one line; nested containers get broken up.
      bool flat = true;
      for (const auto& item : value) flat = flat && item.is_primitive();
      out << '[';
      bool first = true;
      for (const auto& item : value) {
        if (!first) out << (flat && indent >= 0 ? ", " : ",");
        first = false;
        if (!flat) newline(depth + 1);
        emit(out, item, indent, depth + 1);
      }
      if (!flat) newline(depth);
      out << ']';
      return;
    }
    case Json::value_t::number_float:
      out << format_real(value.get<double>());
      return;
    default:
      out << value.dump();
      return;
  }
}

}  // namespace

std::string format_real(double value) {
  if (!std::isfinite(value)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  std::string text(buf);
  if (text.find_first_of(".eE") == std::string::npos) text += ".0";
  return text;
}

void write_json(std::ostream& out, const Json& value, int indent) { emit(out, value, indent, 0); }

std::string dump_json(const Json& value, int indent) {
  std::ostringstream out;
  write_json(out, value, indent);
  return out.str();
}

}  // namespace metagpt
