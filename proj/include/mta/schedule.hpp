#pragma once

#include <string>
#include <vector>

#include "mta/spans.hpp"

namespace mta {

struct ScheduleEntry {
  std::size_t student_layer = 0;
  std::size_t teacher_layer = 0;
  Granularity granularity = Granularity::word;
  bool operator==(const ScheduleEntry&) const = default;
};

struct LayerSchedule {
  std::vector<ScheduleEntry> entries;  // student layers strictly increasing
  std::size_t stride = 0;              // 0 when built from an explicit list
  std::size_t budget = 0;

  std::vector<std::size_t> student_layers() const;
  std::vector<std::size_t> layers_with(Granularity g) const;
  // Human-readable block for run logs.
  std::string describe() const;
};

// Strided top-down selection {N_S, N_S - k, ...} of size M, ascending.
std::vector<std::size_t> select_layers(std::size_t n_student, std::size_t stride, std::size_t budget);

// floor(l_S * N_T / N_S), clamped to at least 1.
std::size_t map_layer(std::size_t student_layer, std::size_t n_student, std::size_t n_teacher);

// Lowest `word_count` layers get word spans, the rest phrase spans.
LayerSchedule assign_granularity(const std::vector<std::size_t>& layers, std::size_t word_count,
                                 std::size_t n_student, std::size_t n_teacher);

LayerSchedule build_schedule(std::size_t n_student, std::size_t n_teacher, std::size_t stride, std::size_t budget,
                             std::size_t word_count);

}  // namespace mta
