#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hierseg/autodiff.hpp"

namespace hierseg {

struct UNetConfig {
  int in_channels = 3;
  int out_channels = 0;  // leaf classes + background
  std::array<int, 3> widths = {8, 16, 32};
};

// Pixel classifier: two conv+relu+maxpool down blocks, a conv+relu
// bottleneck, two nearest-neighbour-upsample + skip-concat + conv+relu up
// blocks, and a 1x1 head. Output spatial size equals input spatial size;
// h and w must be multiples of 4.
class MicroUNet {
 public:
  MicroUNet() = default;
  // Fan-in scaled uniform weights, zero biases, from a seeded generator.
  MicroUNet(const UNetConfig& cfg, std::uint64_t seed);
  // Adopt existing parameters (checkpoint restore); shapes are validated.
  MicroUNet(const UNetConfig& cfg, std::vector<Tensor> params);

  const UNetConfig& config() const { return cfg_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  static std::vector<std::string> parameter_names(const UNetConfig& cfg);

  struct Pass {
    int output = -1;
    std::vector<int> params;  // tape leaf ids, canonical order
  };
  // Appends the whole forward graph to the tape; callers that train read the
  // scores off pass.output and push the loss gradient back through the tape.
  Pass build(Tape& tape, const Tensor& input) const;

  Tensor forward(const Tensor& input) const;
  // Parameter gradients in canonical order for the given upstream dL/dscores.
  std::vector<Tensor> backward(const Tensor& input, const Tensor& upstream) const;

 private:
  UNetConfig cfg_;
  std::vector<Tensor> params_;
};

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a parameter list. Throws NumericError on
// non-finite gradients so a diverged run aborts loudly.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<Tensor>& params, const AdamParams& hp);

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);

  long steps() const { return t_; }
  const AdamParams& hyper() const { return hp_; }

 private:
  AdamParams hp_;
  std::vector<Eigen::MatrixXd> m_, v_;
  long t_ = 0;
};

// Checkpoint file: magic "HLNET1", little-endian uint32 header length, JSON
// header (architecture, leaf count, tree fingerprint, step count), then all
// parameters as little-endian float32 in canonical order, column-major
// within each block.
void save_checkpoint(const std::string& path, const MicroUNet& net, int leaf_count,
                     std::uint64_t tree_fingerprint, long step);

struct LoadedCheckpoint {
  MicroUNet net;
  int leaf_count = 0;
  std::uint64_t tree_fingerprint = 0;
  long step = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace hierseg
