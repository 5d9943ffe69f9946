#include "hierseg/autodiff.hpp"

#include <algorithm>

#include "hierseg/error.hpp"

namespace hierseg {

Tensor Tensor::from_matrix(int h, int w, Eigen::MatrixXd values) {
  if (values.rows() != static_cast<Eigen::Index>(h) * w) {
    throw ValidationError("tensor matrix rows do not match h*w");
  }
  Tensor t;
  t.h = h;
  t.w = w;
  t.c = static_cast<int>(values.cols());
  t.m = std::move(values);
  return t;
}

Eigen::MatrixXd shift_plane(const Eigen::Ref<const Eigen::MatrixXd>& src, int h, int w,
                            int dy, int dx) {
  Eigen::MatrixXd dst = Eigen::MatrixXd::Zero(src.rows(), src.cols());
  const int r0 = std::max(0, -dy), r1 = std::min(h, h - dy);
  const int c0 = std::max(0, -dx), c1 = std::min(w, w - dx);
  const int run = c1 - c0;
  if (run <= 0) return dst;
  for (int r = r0; r < r1; ++r) {
    dst.middleRows(static_cast<Eigen::Index>(r) * w + c0, run) =
        src.middleRows(static_cast<Eigen::Index>(r + dy) * w + c0 + dx, run);
  }
  return dst;
}

int Tape::push(Tensor value) {
  const int id = static_cast<int>(nodes_.size());
  Node n;
  n.grad = Tensor(0, 0, 0);
  n.grad.h = value.h;
  n.grad.w = value.w;
  n.grad.c = value.c;
  n.grad.m = Eigen::MatrixXd::Zero(value.m.rows(), value.m.cols());
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return id;
}

int Tape::leaf(Tensor value) { return push(std::move(value)); }

int Tape::conv3x3(int input, int weight, int bias) {
  const Tensor& x = nodes_[input].value;
  const Tensor& wgt = nodes_[weight].value;
  const Tensor& b = nodes_[bias].value;
  const int cin = x.c;
  const int cout = static_cast<int>(wgt.m.cols());
  if (wgt.m.rows() != 9 * cin) throw ValidationError("conv3x3 weight must have 9*cin rows");
  if (b.m.rows() != 1 || b.m.cols() != cout) throw ValidationError("conv3x3 bias must be 1 x cout");

  Tensor out(x.h, x.w, cout);
  out.m.rowwise() = b.m.row(0);
  for (int o = 0; o < 9; ++o) {
    const int dy = o / 3 - 1, dx = o % 3 - 1;
    out.m.noalias() += shift_plane(x.m, x.h, x.w, dy, dx) * wgt.m.middleRows(o * cin, cin);
  }
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, input, weight, bias, cin]() {
    const Tensor& xv = nodes_[input].value;
    const Eigen::MatrixXd& dout = nodes_[id].grad.m;
    for (int o = 0; o < 9; ++o) {
      const int dy = o / 3 - 1, dx = o % 3 - 1;
      nodes_[weight].grad.m.middleRows(o * cin, cin).noalias() +=
          shift_plane(xv.m, xv.h, xv.w, dy, dx).transpose() * dout;
      nodes_[input].grad.m.noalias() +=
          shift_plane(dout, xv.h, xv.w, -dy, -dx) *
          nodes_[weight].value.m.middleRows(o * cin, cin).transpose();
    }
    nodes_[bias].grad.m.row(0) += dout.colwise().sum();
  };
  return id;
}

int Tape::conv1x1(int input, int weight, int bias) {
  const Tensor& x = nodes_[input].value;
  const Tensor& wgt = nodes_[weight].value;
  const Tensor& b = nodes_[bias].value;
  const int cout = static_cast<int>(wgt.m.cols());
  if (wgt.m.rows() != x.c) throw ValidationError("conv1x1 weight must have cin rows");
  if (b.m.rows() != 1 || b.m.cols() != cout) throw ValidationError("conv1x1 bias must be 1 x cout");

  Tensor out(x.h, x.w, cout);
  out.m = x.m * wgt.m;
  out.m.rowwise() += b.m.row(0);
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, input, weight, bias]() {
    const Eigen::MatrixXd& dout = nodes_[id].grad.m;
    nodes_[weight].grad.m.noalias() += nodes_[input].value.m.transpose() * dout;
    nodes_[input].grad.m.noalias() += dout * nodes_[weight].value.m.transpose();
    nodes_[bias].grad.m.row(0) += dout.colwise().sum();
  };
  return id;
}

int Tape::relu(int input) {
  const Tensor& x = nodes_[input].value;
  Tensor out = x;
  out.m = out.m.cwiseMax(0.0);
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, input]() {
    nodes_[input].grad.m.array() +=
        (nodes_[input].value.m.array() > 0.0).cast<double>() * nodes_[id].grad.m.array();
  };
  return id;
}

int Tape::max_pool2(int input) {
  const Tensor& x = nodes_[input].value;
  if (x.h % 2 != 0 || x.w % 2 != 0) throw ValidationError("max_pool2 needs even spatial dims");
  const int oh = x.h / 2, ow = x.w / 2;
  Tensor out(oh, ow, x.c);
  // argmax row index per (output pixel, channel) for the backward scatter
  std::vector<int> arg(static_cast<std::size_t>(oh) * ow * x.c);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      const Eigen::Index base = static_cast<Eigen::Index>(r) * ow + c;
      const Eigen::Index in00 = static_cast<Eigen::Index>(2 * r) * x.w + 2 * c;
      const Eigen::Index cand[4] = {in00, in00 + 1, in00 + x.w, in00 + x.w + 1};
      for (int ch = 0; ch < x.c; ++ch) {
        int best = 0;
        double bv = x.m(cand[0], ch);
        for (int k = 1; k < 4; ++k) {
          const double v = x.m(cand[k], ch);
          if (v > bv) {
            bv = v;
            best = k;
          }
        }
        out.m(base, ch) = bv;
        arg[static_cast<std::size_t>(base) * x.c + ch] = static_cast<int>(cand[best]);
      }
    }
  }
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, input, arg = std::move(arg)]() {
    const Tensor& g = nodes_[id].grad;
    Eigen::MatrixXd& din = nodes_[input].grad.m;
    for (Eigen::Index p = 0; p < g.m.rows(); ++p) {
      for (int ch = 0; ch < g.c; ++ch) {
        din(arg[static_cast<std::size_t>(p) * g.c + ch], ch) += g.m(p, ch);
      }
    }
  };
  return id;
}

int Tape::upsample2(int input) {
  const Tensor& x = nodes_[input].value;
  const int oh = x.h * 2, ow = x.w * 2;
  Tensor out(oh, ow, x.c);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      out.m.row(static_cast<Eigen::Index>(r) * ow + c) =
          x.m.row(static_cast<Eigen::Index>(r / 2) * x.w + c / 2);
    }
  }
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, input]() {
    const Tensor& g = nodes_[id].grad;
    Eigen::MatrixXd& din = nodes_[input].grad.m;
    const Tensor& xv = nodes_[input].value;
    for (int r = 0; r < g.h; ++r) {
      for (int c = 0; c < g.w; ++c) {
        din.row(static_cast<Eigen::Index>(r / 2) * xv.w + c / 2) +=
            g.m.row(static_cast<Eigen::Index>(r) * g.w + c);
      }
    }
  };
  return id;
}

int Tape::concat(int a, int b) {
  const Tensor& xa = nodes_[a].value;
  const Tensor& xb = nodes_[b].value;
  if (xa.h != xb.h || xa.w != xb.w) throw ValidationError("concat needs equal spatial dims");
  Tensor out(xa.h, xa.w, xa.c + xb.c);
  out.m.leftCols(xa.c) = xa.m;
  out.m.rightCols(xb.c) = xb.m;
  const int id = push(std::move(out));
  nodes_[id].pull = [this, id, a, b]() {
    const Tensor& g = nodes_[id].grad;
    nodes_[a].grad.m += g.m.leftCols(nodes_[a].value.c);
    nodes_[b].grad.m += g.m.rightCols(nodes_[b].value.c);
  };
  return id;
}

void Tape::backward(int node, const Tensor& upstream) {
  if (!nodes_[node].value.same_shape(upstream)) {
    throw ValidationError("upstream gradient shape does not match node value");
  }
  for (Node& n : nodes_) n.grad.m.setZero();
  nodes_[node].grad.m = upstream.m;
  for (int i = node; i >= 0; --i) {
    if (nodes_[i].pull && nodes_[i].grad.m.cwiseAbs().sum() != 0.0) nodes_[i].pull();
  }
}

}  // namespace hierseg
