// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ted {

enum class MapPolicy { Identity, SkipAlternate, Explicit };

/// Teacher layer paired with student layer k (both 1-based; hidden state 0 is the embedding).
///  - Identity: k -> k, needs equal depths.
///  - SkipAlternate: k -> 2k - 1 while 2k <= K, else 2k; needs teacher_depth == 2K.
///  - Explicit: k -> explicit_indices[k - 1].
std::size_t layer_map(std::size_t k, std::size_t student_depth, std::size_t teacher_depth, MapPolicy policy,
                      std::span<const std::size_t> explicit_indices = {});

/// Resolved mapping for a fixed student/teacher depth pair. Values are strictly increasing and
/// lie in [1, teacher_depth].
class LayerMap {
 public:
  LayerMap() = default;
  LayerMap(MapPolicy policy, std::size_t student_depth, std::size_t teacher_depth,
           std::vector<std::size_t> explicit_indices = {});

  static LayerMap identity(std::size_t depth) { return {MapPolicy::Identity, depth, depth}; }

  /// "identity", "skip_alternate" or "explicit:2,4".
  static LayerMap parse(const std::string& text, std::size_t student_depth, std::size_t teacher_depth);
  std::string to_string() const;

  std::size_t operator()(std::size_t k) const;
  MapPolicy policy() const { return policy_; }
  std::size_t student_depth() const { return student_depth_; }
  std::size_t teacher_depth() const { return teacher_depth_; }
  const std::vector<std::size_t>& indices() const { return indices_; }

 private:
  MapPolicy policy_ = MapPolicy::Identity;
  std::size_t student_depth_ = 0;
  std::size_t teacher_depth_ = 0;
  std::vector<std::size_t> indices_;
};

}  // namespace ted
