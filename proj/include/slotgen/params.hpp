#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "slotgen/util.hpp"

namespace slotgen {

using Matrix = Eigen::MatrixXd;

enum class TrainMode { Finetune, Prefix };

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& name);

// One named parameter tensor. Biases are 1 x n matrices so every parameter
// lives in the same registry (counting, freezing, checkpointing, and
// finite-difference sampling all walk the flat list).
struct Tensor {
  std::string name;
  bool prefix_group = false;
  bool trainable = true;
  Matrix value;
  Matrix grad;
};

class ParameterStore {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool prefix_group) {
    Tensor t;
    t.name = std::move(name);
    t.prefix_group = prefix_group;
    t.value = Matrix::Zero(rows, cols);
    t.grad = Matrix::Zero(rows, cols);
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }

  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t size() const { return tensors_.size(); }

  void zero_grads() {
    for (auto& t : tensors_) t.grad.setZero();
  }

  // Finetune trains every group; prefix mode freezes the backbone.
  void set_mode(TrainMode mode) {
    for (auto& t : tensors_) t.trainable = (mode == TrainMode::Finetune) || t.prefix_group;
  }

  // (trainable scalar count, total scalar count)
  std::pair<std::size_t, std::size_t> count_params() const {
    std::size_t trainable = 0, total = 0;
    for (const auto& t : tensors_) {
      const std::size_t n = std::size_t(t.value.size());
      total += n;
      if (t.trainable) trainable += n;
    }
    return {trainable, total};
  }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

 private:
  std::vector<Tensor> tensors_;
};

}  // namespace slotgen
