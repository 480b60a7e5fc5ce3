// SPDX-License-Identifier: Apache-2.0
#include "ted/layer_map.hpp"

#include <sstream>

#include "ted/errors.hpp"

namespace ted {

std::size_t layer_map(std::size_t k, std::size_t student_depth, std::size_t teacher_depth, MapPolicy policy,
                      std::span<const std::size_t> explicit_indices) {
  if (k < 1 || k > student_depth) {
    throw ParameterError("layer_map: k=" + std::to_string(k) + " outside [1, " + std::to_string(student_depth) + "]");
  }
  switch (policy) {
    case MapPolicy::Identity:
      if (student_depth != teacher_depth) {
        throw ParameterError("layer_map: identity mapping needs equal depths (" + std::to_string(student_depth) +
                             " vs " + std::to_string(teacher_depth) + ")");
      }
      return k;
    case MapPolicy::SkipAlternate:
      if (teacher_depth != 2 * student_depth) {
        throw ParameterError("layer_map: skip_alternate needs teacher depth " + std::to_string(2 * student_depth) +
                             ", got " + std::to_string(teacher_depth));
      }
      return 2 * k <= student_depth ? 2 * k - 1 : 2 * k;
    case MapPolicy::Explicit:
      if (explicit_indices.size() != student_depth) {
        throw ParameterError("layer_map: explicit list has " + std::to_string(explicit_indices.size()) +
                             " entries for " + std::to_string(student_depth) + " student layers");
      }
      return explicit_indices[k - 1];
  }
  throw ParameterError("layer_map: unknown policy");
}

LayerMap::LayerMap(MapPolicy policy, std::size_t student_depth, std::size_t teacher_depth,
                   std::vector<std::size_t> explicit_indices)
    : policy_(policy), student_depth_(student_depth), teacher_depth_(teacher_depth) {
  if (student_depth == 0) throw ParameterError("layer map: student depth must be >= 1");
  for (std::size_t k = 1; k <= student_depth; ++k) {
    const std::size_t m = layer_map(k, student_depth, teacher_depth, policy, explicit_indices);
    if (m < 1 || m > teacher_depth) {
      throw ParameterError("layer map: M(" + std::to_string(k) + ")=" + std::to_string(m) + " outside [1, " +
                           std::to_string(teacher_depth) + "]");
    }
    if (!indices_.empty() && m <= indices_.back()) throw ParameterError("layer map: indices must strictly increase");
    indices_.push_back(m);
  }
}

LayerMap LayerMap::parse(const std::string& text, std::size_t student_depth, std::size_t teacher_depth) {
  if (text == "identity") return {MapPolicy::Identity, student_depth, teacher_depth};
  if (text == "skip_alternate") return {MapPolicy::SkipAlternate, student_depth, teacher_depth};
  if (text.rfind("explicit:", 0) == 0) {
    std::vector<std::size_t> idx;
    std::istringstream in(text.substr(9));
    std::string item;
    while (std::getline(in, item, ',')) {
      try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        idx.push_back(v);
      } catch (const std::exception&) {
        throw ParameterError("layer map: bad explicit index '" + item + "'");
      }
    }
    return {MapPolicy::Explicit, student_depth, teacher_depth, std::move(idx)};
  }
  throw ParameterError("layer map: unknown policy '" + text + "'");
}

std::string LayerMap::to_string() const {
  switch (policy_) {
    case MapPolicy::Identity:
      return "identity";
    case MapPolicy::SkipAlternate:
      return "skip_alternate";
    case MapPolicy::Explicit: {
      std::string s = "explicit:";
      for (std::size_t i = 0; i < indices_.size(); ++i) s += (i ? "," : "") + std::to_string(indices_[i]);
      return s;
    }
  }
  return "?";
}

std::size_t LayerMap::operator()(std::size_t k) const {
  if (k < 1 || k > indices_.size()) {
    throw ParameterError("layer map: k=" + std::to_string(k) + " outside [1, " + std::to_string(indices_.size()) + "]");
  }
  return indices_[k - 1];
}

}  // namespace ted
