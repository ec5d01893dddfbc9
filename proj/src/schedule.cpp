#include "mta/schedule.hpp"

#include <algorithm>
#include <sstream>

namespace mta {

std::vector<std::size_t> LayerSchedule::student_layers() const {
  std::vector<std::size_t> out;
  for (const auto& e : entries) out.push_back(e.student_layer);
  return out;
}

std::vector<std::size_t> LayerSchedule::layers_with(Granularity g) const {
  std::vector<std::size_t> out;
  for (const auto& e : entries)
    if (e.granularity == g) out.push_back(e.student_layer);
  return out;
}

std::string LayerSchedule::describe() const {
  std::ostringstream os;
  os << "layer_schedule:\n";
  if (stride) {
    os << "  stride: " << stride << "\n  budget: " << budget << '\n';
  } else {
    os << "  explicit: true\n";
  }
  os << "  entries:\n";
  for (const auto& e : entries) {
    os << "    - {student: " << e.student_layer << ", teacher: " << e.teacher_layer
       << ", granularity: " << to_string(e.granularity) << "}\n";
  }
  return os.str();
}

std::vector<std::size_t> select_layers(std::size_t n_student, std::size_t stride, std::size_t budget) {
  if (budget == 0) throw Error("layer budget must be positive");
  if (stride == 0 && budget > 1) throw Error("layer stride must be positive");
  // N_S - (M - 1) k >= 1
  if ((budget - 1) * stride >= n_student) {
    throw Error("stride " + std::to_string(stride) + " with budget " + std::to_string(budget) +
                " exceeds student depth " + std::to_string(n_student));
  }
  std::vector<std::size_t> layers;
  for (std::size_t j = budget; j-- > 0;) layers.push_back(n_student - j * stride);
  return layers;
}

std::size_t map_layer(std::size_t student_layer, std::size_t n_student, std::size_t n_teacher) {
  if (student_layer < 1 || student_layer > n_student) {
    throw Error("student layer " + std::to_string(student_layer) + " outside 1.." + std::to_string(n_student));
  }
  return std::max<std::size_t>(1, student_layer * n_teacher / n_student);
}

LayerSchedule assign_granularity(const std::vector<std::size_t>& layers, std::size_t word_count,
                                 std::size_t n_student, std::size_t n_teacher) {
  if (layers.empty()) throw Error("layer schedule is empty");
  if (word_count > layers.size()) {
    throw Error("word_count " + std::to_string(word_count) + " exceeds layer budget " + std::to_string(layers.size()));
  }
  if (!std::is_sorted(layers.begin(), layers.end()) ||
      std::adjacent_find(layers.begin(), layers.end()) != layers.end()) {
    throw Error("student layers must be strictly increasing");
  }
  LayerSchedule schedule;
  schedule.budget = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    schedule.entries.push_back({layers[i], map_layer(layers[i], n_student, n_teacher),
                                i < word_count ? Granularity::word : Granularity::phrase});
  }
  return schedule;
}

LayerSchedule build_schedule(std::size_t n_student, std::size_t n_teacher, std::size_t stride, std::size_t budget,
                             std::size_t word_count) {
  LayerSchedule s = assign_granularity(select_layers(n_student, stride, budget), word_count, n_student, n_teacher);
  s.stride = stride;
  return s;
}

}  // namespace mta
