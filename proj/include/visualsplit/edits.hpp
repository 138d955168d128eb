#pragma once

// Edit scripts: ordered JSON lists of {op, args} applied to a bundle.
//
//   [{"op": "recolour_region", "args": {"cluster": 2, "ab": [0, 60]}},
//    {"op": "shift_histogram", "args": {"delta_L": 15}}]

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "visualsplit/descriptors.hpp"

namespace vsplit {

struct RecolourOp {
  int cluster = 0;
  std::array<double, 2> ab{};
  bool operator==(const RecolourOp&) const = default;
};

struct ShiftHistogramOp {
  double delta_L = 0;
  bool operator==(const ShiftHistogramOp&) const = default;
};

using EditOp = std::variant<RecolourOp, ShiftHistogramOp>;

inline nlohmann::json edit_to_json(const EditOp& op) {
  if (const auto* r = std::get_if<RecolourOp>(&op)) {
    return {{"op", "recolour_region"}, {"args", {{"cluster", r->cluster}, {"ab", r->ab}}}};
  }
  return {{"op", "shift_histogram"}, {"args", {{"delta_L", std::get<ShiftHistogramOp>(op).delta_L}}}};
}

/// Parses one {op, args} object. Malformed input raises ConfigError.
inline EditOp edit_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("op") || !j["op"].is_string()) throw ConfigError("edit op needs a string 'op'");
  const auto name = j["op"].get<std::string>();
  const auto args = j.value("args", nlohmann::json::object());
  if (!args.is_object()) throw ConfigError("edit 'args' must be an object");
  const auto number = [&](const nlohmann::json& v, const std::string& what) {
    if (!v.is_number()) throw ConfigError(name + ": '" + what + "' must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(name + ": '" + what + "' must be finite");
    return x;
  };
  if (name == "recolour_region") {
    if (!args.contains("cluster") || !args["cluster"].is_number_integer()) {
      throw ConfigError("recolour_region: 'cluster' must be an integer");
    }
    if (!args.contains("ab") || !args["ab"].is_array() || args["ab"].size() != 2) {
      throw ConfigError("recolour_region: 'ab' must be a pair of numbers");
    }
    return RecolourOp{args["cluster"].get<int>(), {number(args["ab"][0], "ab"), number(args["ab"][1], "ab")}};
  }
  if (name == "shift_histogram") {
    if (!args.contains("delta_L")) throw ConfigError("shift_histogram: 'delta_L' is required");
    return ShiftHistogramOp{number(args["delta_L"], "delta_L")};
  }
  throw ConfigError("unknown edit op '" + name + "'");
}

inline std::vector<EditOp> edit_script_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("edit script must be a JSON list");
  std::vector<EditOp> ops;
  for (const auto& item : j) ops.push_back(edit_from_json(item));
  return ops;
}

inline nlohmann::json edit_script_to_json(const std::vector<EditOp>& ops) {
  auto j = nlohmann::json::array();
  for (const auto& op : ops) j.push_back(edit_to_json(op));
  return j;
}

template <class T>
void apply_edit(DescriptorBundle<T>& bundle, const EditOp& op) {
  if (const auto* r = std::get_if<RecolourOp>(&op)) {
    bundle.segmentation = recolour_region(bundle.segmentation, r->cluster, r->ab);
  } else {
    bundle.histogram = shift_histogram(bundle.histogram, std::get<ShiftHistogramOp>(op).delta_L);
  }
}

/// Applies `ops` in order. Either every op applies or `bundle` is unchanged.
template <class T>
void apply_edits(DescriptorBundle<T>& bundle, const std::vector<EditOp>& ops) {
  DescriptorBundle<T> work = bundle;
  for (const auto& op : ops) apply_edit(work, op);
  bundle = std::move(work);
}

}  // namespace vsplit
