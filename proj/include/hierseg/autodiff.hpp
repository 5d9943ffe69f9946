#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>

namespace hierseg {

// Dense activation or parameter block. Feature maps store pixels row-major:
// row r*w + c of m holds the channels of pixel (r, c). Parameter blocks use
// h = rows, w = 1.
struct Tensor {
  int h = 0, w = 0, c = 0;
  Eigen::MatrixXd m;  // (h*w) x c

  Tensor() = default;
  Tensor(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), m(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h_) * w_, c_)) {}

  static Tensor from_matrix(int h, int w, Eigen::MatrixXd values);

  bool same_shape(const Tensor& o) const { return h == o.h && w == o.w && c == o.c; }
  Eigen::Index rows() const { return m.rows(); }
};

// dst(r, c, :) = src(r+dy, c+dx, :), zero outside; the adjoint of a conv tap.
Eigen::MatrixXd shift_plane(const Eigen::Ref<const Eigen::MatrixXd>& src, int h, int w,
                            int dy, int dx);

// Append-only reverse-mode tape over whole tensors. Append order is already
// topological, so backward() is a single reverse sweep. Gradients accumulate,
// which makes fan-out (skip connections) correct by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Tensor value);
  int conv3x3(int input, int weight, int bias);  // weight (9*cin) x cout, bias 1 x cout
  int conv1x1(int input, int weight, int bias);  // weight cin x cout
  int relu(int input);
  int max_pool2(int input);
  int upsample2(int input);  // nearest neighbour, 2x
  int concat(int a, int b);  // along channels

  const Tensor& value(int node) const { return nodes_[node].value; }
  const Tensor& grad(int node) const { return nodes_[node].grad; }

  void backward(int node, const Tensor& upstream);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void()> pull;  // empty for leaves
  };
  std::vector<Node> nodes_;

  int push(Tensor value);
};

}  // namespace hierseg
