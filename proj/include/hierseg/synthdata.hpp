#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hierseg/autodiff.hpp"
#include "hierseg/hierarchy.hpp"
#include "hierseg/metrics.hpp"
#include "hierseg/rng.hpp"

namespace hierseg {

struct LeafAppearance {
  std::array<double, 3> color = {0.5, 0.5, 0.5};  // mean RGB in [0,1]
  double jitter = 0.03;                           // per-instance color jitter amplitude
  double radius_lo = 4.0, radius_hi = 7.0;        // semi-major axis, pixels
  double ecc_lo = 0.6, ecc_hi = 0.95;             // minor/major axis ratio
  double texture = 0.02;                          // per-pixel noise amplitude
};

struct AppearanceSpec {
  std::uint64_t tree_fingerprint = 0;
  std::vector<LeafAppearance> leaves;  // by dense leaf index

  void validate(const ClassTree& tree) const;
  // Mixes the bit patterns of every field; recorded in manifests so datasets
  // generated from one distribution are recognizably siblings.
  std::uint64_t hash() const;
};

// Super-class siblings share a base hue; leaves within a group differ by
// brightness and a small hue offset, so the coarse cut is easy and the leaf
// cut is learnable but not trivial.
AppearanceSpec default_appearance(const ClassTree& tree, std::uint64_t seed);

// Bounded perturbation of colors and radii: a domain shift, not new classes.
AppearanceSpec shift_appearance(const AppearanceSpec& spec, std::uint64_t seed, double magnitude);

struct DatasetEntry {
  std::string image;      // paths relative to the manifest directory
  std::string instances;
  std::string classes;
};

struct DatasetManifest {
  std::string name;
  std::string tree_document;  // embedded hierarchy, the validation authority
  std::vector<std::string> cut_names;
  int patch_size = 0;
  std::uint64_t seed = 0;
  std::uint64_t appearance_hash = 0;
  std::vector<DatasetEntry> entries;
};

void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

// Writes images plus instance and class maps into out_dir and a manifest at
// out_dir/manifest.json. Blobs never overlap; leaves the cut does not cover
// are drawn in the image but left out of both maps. Fully determined by seed,
// with per-image streams derived as mix64(seed, image-tag, index).
DatasetManifest generate_dataset(const ClassTree& tree, const LabelSet& cut,
                                 const AppearanceSpec& appearance, std::uint64_t seed,
                                 int n_images, int patch_size, const std::string& out_dir,
                                 const std::string& name);

struct AugmentParams {
  int dihedral = 0;         // 0 id, 1 hflip, 2 vflip, 3..5 rot90 k=1..3
  double brightness = 1.0;  // in [0.8, 1.2]
  double hue_shift = 0.0;   // hue rotation, fraction of a full turn
  double sat_scale = 1.0;
};

AugmentParams draw_augment(Rng& rng);
// Geometric part applies to image and masks alike; color part to the image
// only, clipped to [0,1]. Identity parameters return the input unchanged.
void augment_with(const AugmentParams& params, Tensor& image, MaskPair& masks);
void augment(Tensor& image, MaskPair& masks, std::uint64_t seed);

struct LoadedDataset {
  DatasetManifest manifest;
  ClassTree tree;
  LabelSet cut;
  std::vector<Tensor> images;
  std::vector<MaskPair> masks;
  std::vector<int> train_idx, val_idx, test_idx;  // 70/15/15 by seeded shuffle
};

LoadedDataset load_dataset(const std::string& manifest_path);

}  // namespace hierseg
