#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "framefuse/errors.hpp"

namespace framefuse::nn {

/// A named trainable tensor with a gradient slot of identical shape.
/// Shapes are immutable after creation.
struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
};

/// Owns parameters with stable addresses and deterministic (registration)
/// order. Names are unique.
class ParameterStore {
 public:
  Parameter& create(const std::string& name, int rows, int cols);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  long scalar_count() const;
  void zero_grads();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

/// Seeded initialization: weights ("…/w") get truncated normal sigma=0.02
/// (resampled beyond two sigma), biases ("…/b", "…/bias") zeros, layer-norm
/// gains ("…/gain") ones. Applied in registration order.
void init_params(ParameterStore& store, std::uint64_t seed);

/// Binary checkpoint: magic "PMSL", version u32, tensor count u32, then per
/// tensor: name length u16, name bytes, rank u8, dims u32 each, float32
/// little-endian data (row-major). The model kind rides along as a reserved
/// tensor holding the tag bytes. Write-read-write round-trips bit-exactly.
void save_checkpoint(const std::string& path, const std::string& kind, const ParameterStore& store);

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into the store by name; throws InputError on a
/// missing name, shape mismatch, or kind mismatch (when expected_kind given).
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store,
                      const std::string& expected_kind = "");

}  // namespace framefuse::nn
