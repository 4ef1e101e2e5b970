#pragma once

#include <ostream>
#include <string>

#include "json.hpp"

namespace metagpt {

using Json = nlohmann::ordered_json;

// Serializes with every floating-point number printed to 17 significant
// digits, so doubles survive a text round-trip bit-exactly. Integral doubles
// keep a trailing ".0" to stay visibly real-valued.
std::string dump_json(const Json& value, int indent = 2);
void write_json(std::ostream& out, const Json& value, int indent = 2);

std::string format_real(double value);

}  // namespace metagpt
