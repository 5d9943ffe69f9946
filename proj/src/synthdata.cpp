#include "hierseg/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "hierseg/error.hpp"
#include "hierseg/netpbm.hpp"

namespace hierseg {
namespace {

using nlohmann::json;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0) {
    if (mx == r) {
      h = std::fmod((g - b) / d, 6.0) / 6.0;
    } else if (mx == g) {
      h = ((b - r) / d + 2.0) / 6.0;
    } else {
      h = ((r - g) / d + 4.0) / 6.0;
    }
    if (h < 0) h += 1.0;
  }
  const double s = mx > 0 ? d / mx : 0.0;
  return {h, s, mx};
}

std::uint64_t mix_double(std::uint64_t h, double v) {
  return mix64(h, std::bit_cast<std::uint64_t>(v));
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::uint64_t parse_hex16(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(s, &used, 16);
    if (used != s.size() || s.empty()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(std::string("malformed ") + what + " in manifest: " + s);
  }
}

// Index of the depth-1 ancestor (child of the root) the leaf sits under.
int group_of_leaf(const ClassTree& tree, int leaf_node) {
  int node = leaf_node;
  while (tree.nodes[node].parent > 0) node = tree.nodes[node].parent;
  if (tree.nodes[node].parent != 0) return 0;  // the root itself
  const auto& top = tree.nodes[0].children;
  return static_cast<int>(std::find(top.begin(), top.end(), node) - top.begin());
}

}  // namespace

void AppearanceSpec::validate(const ClassTree& tree) const {
  if (tree_fingerprint != tree.fingerprint) {
    throw ValidationError("appearance spec belongs to a different tree");
  }
  if (static_cast<int>(leaves.size()) != tree.leaf_count()) {
    throw ValidationError("appearance spec leaf count does not match the tree");
  }
  for (const LeafAppearance& a : leaves) {
    for (double ch : a.color) {
      if (ch < 0.0 || ch > 1.0) throw ValidationError("appearance color outside [0,1]");
    }
    if (a.jitter < 0 || a.texture < 0) throw ValidationError("negative appearance noise");
    if (a.radius_lo < 2.0 || a.radius_hi < a.radius_lo) {
      throw ValidationError("appearance radii must satisfy 2 <= lo <= hi");
    }
    if (a.ecc_lo <= 0.0 || a.ecc_hi > 1.0 || a.ecc_lo > a.ecc_hi) {
      throw ValidationError("appearance eccentricity range must sit inside (0,1]");
    }
  }
}

std::uint64_t AppearanceSpec::hash() const {
  std::uint64_t h = mix64(tree_fingerprint, 0x61707065u);
  for (const LeafAppearance& a : leaves) {
    for (double ch : a.color) h = mix_double(h, ch);
    h = mix_double(h, a.jitter);
    h = mix_double(h, a.radius_lo);
    h = mix_double(h, a.radius_hi);
    h = mix_double(h, a.ecc_lo);
    h = mix_double(h, a.ecc_hi);
    h = mix_double(h, a.texture);
  }
  return h;
}

AppearanceSpec default_appearance(const ClassTree& tree, std::uint64_t seed) {
  Rng rng(mix64(seed, seed_ns::kAppearance));
  const int groups = std::max<std::size_t>(1, tree.nodes[0].children.size());

  AppearanceSpec spec;
  spec.tree_fingerprint = tree.fingerprint;
  std::vector<int> rank_in_group(groups, 0);
  for (int leaf = 0; leaf < tree.leaf_count(); ++leaf) {
    const int g = group_of_leaf(tree, tree.leaf_order[leaf]);
    const int j = rank_in_group[g]++;
    // Groups are far apart in hue; siblings share the hue band and separate
    // mostly by brightness, so the coarse labels are easier than the fine ones.
    const double hue = static_cast<double>(g) / groups + 0.03 * (j % 3 - 1) +
                       rng.uniform(-0.01, 0.01);
    const double value = 0.85 - 0.18 * (j % 3) + rng.uniform(-0.02, 0.02);
    const double sat = 0.75 + rng.uniform(-0.05, 0.05);
    LeafAppearance a;
    a.color = hsv_to_rgb(hue, sat, value);
    for (double& ch : a.color) ch = clamp01(ch);
    spec.leaves.push_back(a);
  }
  return spec;
}

AppearanceSpec shift_appearance(const AppearanceSpec& spec, std::uint64_t seed, double magnitude) {
  if (magnitude < 0.0 || magnitude >= 1.0) {
    throw ValidationError("shift magnitude must sit inside [0,1)");
  }
  Rng rng(mix64(seed, seed_ns::kAppearance, 0x73686966u));
  AppearanceSpec out = spec;
  for (LeafAppearance& a : out.leaves) {
    for (double& ch : a.color) ch = clamp01(ch + rng.uniform(-magnitude, magnitude));
    const double scale = 1.0 + rng.uniform(-magnitude, magnitude);
    a.radius_lo = std::max(2.0, a.radius_lo * scale);
    a.radius_hi = std::max(a.radius_lo, a.radius_hi * scale);
  }
  return out;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  json doc;
  doc["name"] = manifest.name;
  doc["tree"] = json::parse(manifest.tree_document);
  doc["cut"] = manifest.cut_names;
  doc["patch_size"] = manifest.patch_size;
  doc["image_count"] = manifest.entries.size();
  doc["seed"] = hex16(manifest.seed);
  doc["appearance_hash"] = hex16(manifest.appearance_hash);
  json images = json::array();
  for (const DatasetEntry& e : manifest.entries) {
    images.push_back({{"image", e.image}, {"instances", e.instances}, {"classes", e.classes}});
  }
  doc["images"] = images;

  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest: " + path);
  out << doc.dump(2) << "\n";
  if (!out) throw ValidationError("short write: " + path);
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read manifest: " + path);
  std::stringstream buf;
  buf << in.rdbuf();

  DatasetManifest m;
  try {
    const json doc = json::parse(buf.str());
    m.name = doc.at("name").get<std::string>();
    m.tree_document = doc.at("tree").dump();
    m.cut_names = doc.at("cut").get<std::vector<std::string>>();
    m.patch_size = doc.at("patch_size").get<int>();
    m.seed = parse_hex16(doc.at("seed").get<std::string>(), "seed");
    m.appearance_hash = parse_hex16(doc.at("appearance_hash").get<std::string>(), "appearance hash");
    for (const json& e : doc.at("images")) {
      m.entries.push_back({e.at("image").get<std::string>(), e.at("instances").get<std::string>(),
                           e.at("classes").get<std::string>()});
    }
    if (doc.at("image_count").get<std::size_t>() != m.entries.size()) {
      throw ValidationError("manifest image count does not match its image list: " + path);
    }
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError("malformed manifest " + path + ": " + e.what());
  }
  if (m.patch_size < 8 || m.patch_size % 4 != 0) {
    throw ValidationError("manifest patch size must be a multiple of 4, at least 8: " + path);
  }
  return m;
}

DatasetManifest generate_dataset(const ClassTree& tree, const LabelSet& cut,
                                 const AppearanceSpec& appearance, std::uint64_t seed,
                                 int n_images, int patch_size, const std::string& out_dir,
                                 const std::string& name) {
  if (cut.tree_fingerprint != tree.fingerprint) {
    throw ValidationError("cut was validated against a different tree");
  }
  appearance.validate(tree);
  if (n_images < 1) throw ValidationError("need at least one image");
  if (patch_size < 8 || patch_size % 4 != 0) {
    throw ValidationError("patch size must be a multiple of 4, at least 8");
  }
  double max_radius = 0;
  for (const LeafAppearance& a : appearance.leaves) max_radius = std::max(max_radius, a.radius_hi);
  if (2.0 * (max_radius + 1.0) > patch_size) {
    throw ValidationError("patch size too small for the appearance radii");
  }

  std::filesystem::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.name = name;
  manifest.tree_document = serialize_hierarchy(tree);
  manifest.cut_names = cut.member_names;
  manifest.patch_size = patch_size;
  manifest.seed = seed;
  manifest.appearance_hash = appearance.hash();

  const int base = std::max(1, patch_size / 16);
  for (int img = 0; img < n_images; ++img) {
    Rng rng(mix64(seed, seed_ns::kImage, static_cast<std::uint64_t>(img)));

    Tensor image(patch_size, patch_size, 3);
    for (Eigen::Index p = 0; p < image.rows(); ++p) {
      for (int ch = 0; ch < 3; ++ch) image.m(p, ch) = 0.08 + rng.uniform(-0.015, 0.015);
    }
    Eigen::MatrixXi inst = Eigen::MatrixXi::Zero(patch_size, patch_size);
    Eigen::MatrixXi cls = Eigen::MatrixXi::Zero(patch_size, patch_size);
    Eigen::MatrixXi occupied = Eigen::MatrixXi::Zero(patch_size, patch_size);

    const int n_blobs = base + rng.next_int(base + 1);
    int next_id = 0;
    for (int blob = 0; blob < n_blobs; ++blob) {
      // Leaf choice ranges over ALL leaves; the cut only decides labeling,
      // so uncovered classes still appear in the pixels.
      const int leaf = rng.next_int(tree.leaf_count());
      const LeafAppearance& ap = appearance.leaves[leaf];
      const double a = rng.uniform(ap.radius_lo, ap.radius_hi);
      const double b = a * rng.uniform(ap.ecc_lo, ap.ecc_hi);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double ct = std::cos(theta), st = std::sin(theta);

      std::vector<std::pair<int, int>> pixels;
      bool placed = false;
      for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
        const double cy = rng.uniform(a + 1.0, patch_size - a - 1.0);
        const double cx = rng.uniform(a + 1.0, patch_size - a - 1.0);
        pixels.clear();
        const int r0 = std::max(0, static_cast<int>(std::floor(cy - a)));
        const int r1 = std::min(patch_size - 1, static_cast<int>(std::ceil(cy + a)));
        const int c0 = std::max(0, static_cast<int>(std::floor(cx - a)));
        const int c1 = std::min(patch_size - 1, static_cast<int>(std::ceil(cx + a)));
        bool clash = false;
        for (int r = r0; r <= r1 && !clash; ++r) {
          for (int c = c0; c <= c1; ++c) {
            const double dy = r - cy, dx = c - cx;
            const double u = ct * dx + st * dy;
            const double v = -st * dx + ct * dy;
            if ((u * u) / (a * a) + (v * v) / (b * b) > 1.0) continue;
            // One-pixel gap keeps ground-truth connected components separate.
            for (int k = 0; k < 5; ++k) {
              static const int off[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
              const int rr = r + off[k][0], cc = c + off[k][1];
              if (rr >= 0 && rr < patch_size && cc >= 0 && cc < patch_size && occupied(rr, cc)) {
                clash = true;
                break;
              }
            }
            if (clash) break;
            pixels.push_back({r, c});
          }
        }
        placed = !clash && !pixels.empty();
      }
      if (!placed) {
        throw ValidationError("could not place blob " + std::to_string(blob + 1) + " of image " +
                              std::to_string(img) + "; patch too small for the blob density");
      }

      std::array<double, 3> jit;
      for (double& j : jit) j = rng.uniform(-ap.jitter, ap.jitter);
      const std::optional<int> member = project_label(tree, cut, tree.leaf_order[leaf]);
      const int id = member ? ++next_id : 0;
      for (const auto& [r, c] : pixels) {
        occupied(r, c) = 1;
        const Eigen::Index row = static_cast<Eigen::Index>(r) * patch_size + c;
        for (int ch = 0; ch < 3; ++ch) {
          image.m(row, ch) = clamp01(ap.color[ch] + jit[ch] + rng.uniform(-ap.texture, ap.texture));
        }
        if (member) {
          inst(r, c) = id;
          cls(r, c) = *member + 1;
        }
      }
    }

    char stem[32];
    std::snprintf(stem, sizeof stem, "%04d", img);
    DatasetEntry entry{std::string("img_") + stem + ".ppm", std::string("inst_") + stem + ".pgm",
                       std::string("cls_") + stem + ".pgm"};
    write_ppm(out_dir + "/" + entry.image, image);
    write_pgm16(out_dir + "/" + entry.instances, inst);
    write_pgm8(out_dir + "/" + entry.classes, cls);
    manifest.entries.push_back(entry);
  }

  write_manifest(out_dir + "/manifest.json", manifest);
  return manifest;
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.dihedral = rng.next_int(6);
  p.brightness = rng.uniform(0.8, 1.2);
  p.hue_shift = rng.uniform(-0.05, 0.05);
  p.sat_scale = rng.uniform(0.85, 1.15);
  return p;
}

namespace {

// Output pixel (r, c) reads input pixel map(r, c) for the square side n.
template <typename Map>
void permute_square(Tensor& image, MaskPair& masks, int n, Map map) {
  Tensor src_img = image;
  const Eigen::MatrixXi src_inst = masks.instances;
  const Eigen::MatrixXi src_cls = masks.classes;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const auto [sr, sc] = map(r, c);
      image.m.row(static_cast<Eigen::Index>(r) * n + c) =
          src_img.m.row(static_cast<Eigen::Index>(sr) * n + sc);
      masks.instances(r, c) = src_inst(sr, sc);
      masks.classes(r, c) = src_cls(sr, sc);
    }
  }
}

}  // namespace

void augment_with(const AugmentParams& params, Tensor& image, MaskPair& masks) {
  if (image.h != image.w) throw ValidationError("augmentation needs a square patch");
  if (masks.instances.rows() != image.h || masks.instances.cols() != image.w ||
      masks.classes.rows() != image.h || masks.classes.cols() != image.w) {
    throw ValidationError("mask shape does not match the image");
  }
  if (params.dihedral < 0 || params.dihedral > 5) throw ValidationError("bad dihedral code");

  const int n = image.h;
  switch (params.dihedral) {
    case 0:
      break;
    case 1:  // horizontal flip
      permute_square(image, masks, n, [n](int r, int c) { return std::pair(r, n - 1 - c); });
      break;
    case 2:  // vertical flip
      permute_square(image, masks, n, [n](int r, int c) { return std::pair(n - 1 - r, c); });
      break;
    case 3:  // 90 degrees clockwise
      permute_square(image, masks, n, [n](int r, int c) { return std::pair(n - 1 - c, r); });
      break;
    case 4:  // 180 degrees
      permute_square(image, masks, n,
                     [n](int r, int c) { return std::pair(n - 1 - r, n - 1 - c); });
      break;
    case 5:  // 270 degrees clockwise
      permute_square(image, masks, n, [n](int r, int c) { return std::pair(c, n - 1 - r); });
      break;
  }

  // Identity color parameters skip the conversions entirely so an identity
  // draw returns the input bit for bit.
  if (params.hue_shift != 0.0 || params.sat_scale != 1.0) {
    for (Eigen::Index p = 0; p < image.rows(); ++p) {
      auto [h, s, v] = rgb_to_hsv(image.m(p, 0), image.m(p, 1), image.m(p, 2));
      const auto rgb = hsv_to_rgb(h + params.hue_shift, clamp01(s * params.sat_scale), v);
      for (int ch = 0; ch < 3; ++ch) image.m(p, ch) = clamp01(rgb[ch]);
    }
  }
  if (params.brightness != 1.0) {
    image.m = (image.m * params.brightness).cwiseMin(1.0).cwiseMax(0.0);
  }
}

void augment(Tensor& image, MaskPair& masks, std::uint64_t seed) {
  Rng rng(seed);
  augment_with(draw_augment(rng), image, masks);
}

LoadedDataset load_dataset(const std::string& manifest_path) {
  LoadedDataset ds;
  ds.manifest = read_manifest(manifest_path);
  ds.tree = parse_hierarchy(ds.manifest.tree_document);
  ds.cut = validate_cut(ds.tree, ds.manifest.cut_names);

  const std::string dir = std::filesystem::path(manifest_path).parent_path().string();
  const auto resolve = [&dir](const std::string& rel) {
    return dir.empty() ? rel : dir + "/" + rel;
  };

  const int n = static_cast<int>(ds.manifest.entries.size());
  const int ps = ds.manifest.patch_size;
  for (const DatasetEntry& e : ds.manifest.entries) {
    Tensor image = read_ppm(resolve(e.image));
    if (image.h != ps || image.w != ps) {
      throw ValidationError("image size mismatch: " + resolve(e.image));
    }
    MaskPair mp;
    mp.instances = read_pgm(resolve(e.instances));
    mp.classes = read_pgm(resolve(e.classes));
    if (mp.instances.rows() != ps || mp.instances.cols() != ps || mp.classes.rows() != ps ||
        mp.classes.cols() != ps) {
      throw ValidationError("mask size mismatch: " + resolve(e.instances));
    }
    try {
      mp.validate(ds.cut.size());
    } catch (const ValidationError& err) {
      throw ValidationError(std::string(err.what()) + " in " + resolve(e.classes));
    }
    ds.images.push_back(std::move(image));
    ds.masks.push_back(std::move(mp));
  }

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix64(ds.manifest.seed, seed_ns::kSplit));
  rng.shuffle(order);
  const int n_train = static_cast<int>(std::floor(0.7 * n));
  const int n_val = static_cast<int>(std::floor(0.15 * n));
  ds.train_idx.assign(order.begin(), order.begin() + n_train);
  ds.val_idx.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  ds.test_idx.assign(order.begin() + n_train + n_val, order.end());
  return ds;
}

}  // namespace hierseg
