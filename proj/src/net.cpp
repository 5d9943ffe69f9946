#include "hierseg/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "hierseg/error.hpp"
#include "hierseg/rng.hpp"

namespace hierseg {
namespace {

using nlohmann::json;

struct BlockShape {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

void check_config(const UNetConfig& cfg) {
  if (cfg.in_channels <= 0 || cfg.out_channels <= 0) {
    throw ValidationError("network channel counts must be positive");
  }
  for (int w : cfg.widths) {
    if (w <= 0) throw ValidationError("network widths must be positive");
  }
}

std::vector<BlockShape> layout(const UNetConfig& cfg) {
  const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2];
  return {
      {"down1_w", 9 * cfg.in_channels, w0}, {"down1_b", 1, w0},
      {"down2_w", 9 * w0, w1},              {"down2_b", 1, w1},
      {"bottleneck_w", 9 * w1, w2},         {"bottleneck_b", 1, w2},
      {"up1_w", 9 * (w2 + w1), w1},         {"up1_b", 1, w1},
      {"up2_w", 9 * (w1 + w0), w0},         {"up2_b", 1, w0},
      {"head_w", w0, cfg.out_channels},     {"head_b", 1, cfg.out_channels},
  };
}

}  // namespace

std::vector<std::string> MicroUNet::parameter_names(const UNetConfig& cfg) {
  std::vector<std::string> names;
  for (const BlockShape& b : layout(cfg)) names.push_back(b.name);
  return names;
}

MicroUNet::MicroUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  check_config(cfg);
  Rng rng(seed);
  for (const BlockShape& b : layout(cfg)) {
    Tensor t(static_cast<int>(b.rows), 1, static_cast<int>(b.cols));
    const bool is_bias = b.name.ends_with("_b");
    if (!is_bias) {
      // fan_in is the weight's row count for both 3x3 and 1x1 convolutions.
      const double bound = std::sqrt(3.0 / static_cast<double>(b.rows));
      for (Eigen::Index j = 0; j < t.m.cols(); ++j) {
        for (Eigen::Index i = 0; i < t.m.rows(); ++i) {
          t.m(i, j) = rng.uniform(-bound, bound);
        }
      }
    }
    params_.push_back(std::move(t));
  }
}

MicroUNet::MicroUNet(const UNetConfig& cfg, std::vector<Tensor> params) : cfg_(cfg) {
  check_config(cfg);
  const std::vector<BlockShape> shapes = layout(cfg);
  if (params.size() != shapes.size()) {
    throw ValidationError("parameter list has " + std::to_string(params.size()) +
                          " blocks, expected " + std::to_string(shapes.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params[i].m.rows() != shapes[i].rows || params[i].m.cols() != shapes[i].cols) {
      throw ValidationError("parameter block " + shapes[i].name + " has wrong shape");
    }
  }
  params_ = std::move(params);
}

MicroUNet::Pass MicroUNet::build(Tape& tape, const Tensor& input) const {
  if (params_.empty()) throw ValidationError("network has no parameters");
  if (input.c != cfg_.in_channels) {
    throw ValidationError("input has " + std::to_string(input.c) + " channels, expected " +
                          std::to_string(cfg_.in_channels));
  }
  if (input.h < 4 || input.w < 4 || input.h % 4 != 0 || input.w % 4 != 0) {
    throw ValidationError("input height and width must be positive multiples of 4");
  }

  Pass pass;
  for (const Tensor& p : params_) pass.params.push_back(tape.leaf(p));
  const std::vector<int>& P = pass.params;
  const int x = tape.leaf(input);

  const int a1 = tape.relu(tape.conv3x3(x, P[0], P[1]));    // h x w x w0
  const int p1 = tape.max_pool2(a1);                        // h/2
  const int a2 = tape.relu(tape.conv3x3(p1, P[2], P[3]));   // h/2 x w/2 x w1
  const int p2 = tape.max_pool2(a2);                        // h/4
  const int b = tape.relu(tape.conv3x3(p2, P[4], P[5]));    // h/4 x w/4 x w2
  const int u1 = tape.concat(tape.upsample2(b), a2);        // h/2, w2 + w1
  const int a3 = tape.relu(tape.conv3x3(u1, P[6], P[7]));   // h/2 x w/2 x w1
  const int u2 = tape.concat(tape.upsample2(a3), a1);       // h, w1 + w0
  const int a4 = tape.relu(tape.conv3x3(u2, P[8], P[9]));   // h x w x w0
  pass.output = tape.conv1x1(a4, P[10], P[11]);             // h x w x out
  return pass;
}

Tensor MicroUNet::forward(const Tensor& input) const {
  Tape tape;
  const Pass pass = build(tape, input);
  return tape.value(pass.output);
}

std::vector<Tensor> MicroUNet::backward(const Tensor& input, const Tensor& upstream) const {
  Tape tape;
  const Pass pass = build(tape, input);
  tape.backward(pass.output, upstream);
  std::vector<Tensor> grads;
  grads.reserve(pass.params.size());
  for (int id : pass.params) grads.push_back(tape.grad(id));
  return grads;
}

AdamState::AdamState(const std::vector<Tensor>& params, const AdamParams& hp) : hp_(hp) {
  if (hp.learning_rate < 0 || hp.beta1 < 0 || hp.beta1 >= 1 || hp.beta2 < 0 || hp.beta2 >= 1 ||
      hp.epsilon <= 0) {
    throw ValidationError("invalid optimizer hyperparameters");
  }
  for (const Tensor& p : params) {
    m_.push_back(Eigen::MatrixXd::Zero(p.m.rows(), p.m.cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p.m.rows(), p.m.cols()));
  }
}

void AdamState::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ValidationError("optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].m.allFinite()) {
      throw NumericError("non-finite gradient in parameter block " + std::to_string(i));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Eigen::MatrixXd& g = grads[i].m;
    m_[i] = hp_.beta1 * m_[i] + (1.0 - hp_.beta1) * g;
    v_[i] = hp_.beta2 * v_[i] + (1.0 - hp_.beta2) * g.cwiseProduct(g);
    params[i].m.array() -=
        hp_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + hp_.epsilon);
  }
}

namespace {

void put_u32_le(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32_le(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

constexpr char kMagic[6] = {'H', 'L', 'N', 'E', 'T', '1'};

}  // namespace

void save_checkpoint(const std::string& path, const MicroUNet& net, int leaf_count,
                     std::uint64_t tree_fingerprint, long step) {
  json header;
  header["arch"] = {{"in_channels", net.config().in_channels},
                    {"out_channels", net.config().out_channels},
                    {"widths", net.config().widths}};
  header["leaf_count"] = leaf_count;
  header["tree_fingerprint"] = fingerprint_hex(tree_fingerprint);
  header["step"] = step;
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof kMagic);
  put_u32_le(out, static_cast<std::uint32_t>(head.size()));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Tensor& p : net.parameters()) {
    // Column-major walk matches Eigen's storage, so values round-trip in order.
    for (Eigen::Index j = 0; j < p.m.cols(); ++j) {
      for (Eigen::Index i = 0; i < p.m.rows(); ++i) {
        put_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(p.m(i, j))));
      }
    }
  }
  if (!out) throw ValidationError("short write while saving checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read checkpoint: " + path);
  char magic[6];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError("not a checkpoint file: " + path);
  }
  const std::uint32_t head_len = get_u32_le(in);
  if (!in || head_len == 0 || head_len > (1u << 20)) {
    throw ValidationError("corrupt checkpoint header length: " + path);
  }
  std::string head(head_len, '\0');
  in.read(head.data(), head_len);
  if (!in) throw ValidationError("truncated checkpoint header: " + path);

  UNetConfig cfg;
  LoadedCheckpoint result;
  try {
    const json header = json::parse(head);
    const json& arch = header.at("arch");
    cfg.in_channels = arch.at("in_channels").get<int>();
    cfg.out_channels = arch.at("out_channels").get<int>();
    const auto widths = arch.at("widths").get<std::vector<int>>();
    if (widths.size() != cfg.widths.size()) {
      throw ValidationError("checkpoint widths list has wrong length");
    }
    std::copy(widths.begin(), widths.end(), cfg.widths.begin());
    result.leaf_count = header.at("leaf_count").get<int>();
    result.tree_fingerprint =
        std::stoull(header.at("tree_fingerprint").get<std::string>(), nullptr, 16);
    result.step = header.at("step").get<long>();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
  }

  std::vector<Tensor> params;
  for (const BlockShape& b : layout(cfg)) {
    Tensor t(static_cast<int>(b.rows), 1, static_cast<int>(b.cols));
    for (Eigen::Index j = 0; j < t.m.cols(); ++j) {
      for (Eigen::Index i = 0; i < t.m.rows(); ++i) {
        const std::uint32_t bits = get_u32_le(in);
        if (!in) throw ValidationError("truncated checkpoint parameters: " + path);
        t.m(i, j) = static_cast<double>(std::bit_cast<float>(bits));
      }
    }
    params.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("trailing data after checkpoint parameters: " + path);
  }
  result.net = MicroUNet(cfg, std::move(params));
  return result;
}

}  // namespace hierseg
