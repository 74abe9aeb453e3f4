#include "psinet/model_params.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <set>

#include "psinet/error.hpp"

namespace psinet {

std::string Partition::prefix() const {
  return shared() ? std::string("shared") : "group" + std::to_string(group);
}

std::pair<Partition, std::string> split_param_name(std::string_view name) {
  const auto slash = name.find('/');
  if (slash == std::string_view::npos) {
    throw ConfigError("parameter name '" + std::string(name) +
                      "' lacks a partition prefix");
  }
  const std::string_view head = name.substr(0, slash);
  std::string rest(name.substr(slash + 1));
  if (head == "shared") return {Partition{}, std::move(rest)};
  if (head.starts_with("group") && head.size() > 5) {
    std::size_t g = 0;
    const auto digits = head.substr(5);
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), g);
    if (ec == std::errc() && ptr == digits.data() + digits.size()) {
      return {Partition{g}, std::move(rest)};
    }
  }
  throw ConfigError("parameter name '" + std::string(name) +
                    "' has unknown partition prefix '" + std::string(head) + "'");
}

std::string make_param_name(Partition partition, std::string_view layer,
                            std::string_view role) {
  std::string out = partition.prefix();
  out += '/';
  out += layer;
  out += '.';
  out += role;
  return out;
}

bool is_buffer_param(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var") ||
         name.ends_with(".num_batches");
}

bool ModelParams::contains(std::string_view name) const {
  return tensors_.find(name) != tensors_.end();
}

const Tensor& ModelParams::at(std::string_view name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw AlignmentError("no parameter named '" + std::string(name) + "'");
  }
  return it->second;
}

Tensor& ModelParams::at(std::string_view name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw AlignmentError("no parameter named '" + std::string(name) + "'");
  }
  return it->second;
}

void ModelParams::set(std::string name, Tensor value) {
  split_param_name(name);
  tensors_.insert_or_assign(std::move(name), std::move(value));
}

std::size_t ModelParams::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

std::size_t ModelParams::trainable_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) {
    if (!is_buffer_param(name)) n += t.numel();
  }
  return n;
}

ModelParams ModelParams::subset(Partition partition) const {
  ModelParams out(fingerprint_);
  for (const auto& [name, t] : tensors_) {
    if (split_param_name(name).first == partition) out.tensors_.emplace(name, t);
  }
  return out;
}

std::vector<std::size_t> ModelParams::groups() const {
  std::set<std::size_t> ids;
  for (const auto& [name, _] : tensors_) {
    const Partition p = split_param_name(name).first;
    if (!p.shared()) ids.insert(p.group);
  }
  return {ids.begin(), ids.end()};
}

void ModelParams::merge(const ModelParams& other) {
  for (const auto& [name, t] : other.tensors_) {
    if (!tensors_.emplace(name, t).second) {
      throw AlignmentError("merge: duplicate parameter '" + name + "'");
    }
  }
}

bool ModelParams::all_finite() const noexcept {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const auto& kv) { return kv.second.all_finite(); });
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) noexcept {
  if (a.tensors().size() != b.tensors().size()) return false;
  auto ib = b.tensors().begin();
  for (const auto& [name, t] : a.tensors()) {
    if (name != ib->first || !bitwise_equal(t, ib->second)) return false;
    ++ib;
  }
  return true;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  if (a.tensors().size() != b.tensors().size()) {
    throw AlignmentError("max_abs_diff: parameter sets differ in size");
  }
  double worst = 0.0;
  for (const auto& [name, t] : a.tensors()) {
    worst = std::max(worst, max_abs_diff(t, b.at(name)));
  }
  return worst;
}

}  // namespace psinet
