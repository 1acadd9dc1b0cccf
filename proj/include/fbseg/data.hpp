#pragma once

// Dataset ingestion and splitting: non-overlapping tiling of square source
// images, seeded fold/split assignment, a synthetic 4-class generator for
// desk-scale runs, and the persistent tile index.

#include <cstdint>
#include <string>
#include <vector>

#include "fbseg/common.hpp"

namespace fbseg {

enum class Role { Train, Val, Test };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::Train: return "train";
    case Role::Val: return "val";
    case Role::Test: return "test";
  }
  return "?";
}
Role parse_role(const std::string& s);

struct TileRecord {
  std::string image_id;
  int tile_row = 0;
  int tile_col = 0;
  int fold = 0;
  Role role = Role::Train;
};

struct LabeledTile {
  std::string image_id;
  int tile_row = 0;
  int tile_col = 0;
  int size = 0;
  std::vector<float> image;          // size*size grayscale in [0,1]
  std::vector<std::uint8_t> labels;  // size*size values in {0,1,2,3}
};

constexpr int kNumClasses = 4;

// Optional remap from raw label pixel values to class indices; identity when
// empty (raw values must then already be < kNumClasses).
using LabelPalette = std::vector<std::pair<int, int>>;

// Tiles every images/<id> + labels/<id> pair (sorted by id) into
// non-overlapping tile_size x tile_size crops, row-major.
std::vector<LabeledTile> tile_dataset(const std::string& images_dir,
                                      const std::string& labels_dir, int tile_size,
                                      const LabelPalette& palette = {});

// Per-fold role of every tile. Folds are independent seeded splits: the
// stated per-fold sizes (192/48/80 of 320) make disjoint rotating test sets
// impossible, so each fold draws its own shuffled partition.
struct FoldAssignment {
  std::vector<std::vector<Role>> roles;  // [fold][tile]
  int n_folds() const { return static_cast<int>(roles.size()); }
};

FoldAssignment make_folds(int n_tiles, int n_folds, std::uint64_t seed, int n_train,
                          int n_val, int n_test);

std::vector<LabeledTile> synth_generate(int n_images, int size, std::uint64_t seed);

std::vector<TileRecord> build_records(const std::vector<LabeledTile>& tiles,
                                      const FoldAssignment& folds);
void save_index_csv(const std::string& path, const std::vector<TileRecord>& records);
std::vector<TileRecord> load_index_csv(const std::string& path);

struct Normalization {
  float mean = 0.0f;
  float stddev = 1.0f;
};

// Mean/std over the pixels of the selected (training) tiles only.
Normalization compute_normalization(const std::vector<LabeledTile>& tiles,
                                    const std::vector<int>& indices);

}  // namespace fbseg
