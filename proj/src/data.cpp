#include "fbseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fbseg/image_io.hpp"

namespace fs = std::filesystem;

namespace fbseg {

Role parse_role(const std::string& s) {
  if (s == "train") return Role::Train;
  if (s == "val") return Role::Val;
  if (s == "test") return Role::Test;
  throw DataError("unknown role: " + s);
}

std::vector<LabeledTile> tile_dataset(const std::string& images_dir,
                                      const std::string& labels_dir, int tile_size,
                                      const LabelPalette& palette) {
  if (tile_size < 1) throw ConfigError("tile_size must be positive");
  if (!fs::is_directory(images_dir)) throw DataError("missing images directory: " + images_dir);
  if (!fs::is_directory(labels_dir)) throw DataError("missing labels directory: " + labels_dir);

  std::vector<fs::path> image_files;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.is_regular_file()) image_files.push_back(e.path());
  std::sort(image_files.begin(), image_files.end());
  if (image_files.empty()) throw DataError("no images found in " + images_dir);

  int remap[256];
  std::fill(std::begin(remap), std::end(remap), -1);
  if (palette.empty()) {
    for (int i = 0; i < kNumClasses; ++i) remap[i] = i;
  } else {
    for (auto& [raw, cls] : palette) {
      if (raw < 0 || raw > 255 || cls < 0 || cls >= kNumClasses)
        throw ConfigError("invalid palette entry " + std::to_string(raw) + "->" +
                          std::to_string(cls));
      remap[raw] = cls;
    }
  }

  std::vector<LabeledTile> tiles;
  for (const auto& img_path : image_files) {
    const std::string id = img_path.stem().string();
    fs::path label_path = fs::path(labels_dir) / img_path.filename();
    if (!fs::exists(label_path)) {
      // Image and label may use different container formats.
      bool found = false;
      for (const char* ext : {".png", ".tif", ".tiff", ".pgm"}) {
        fs::path cand = fs::path(labels_dir) / (id + ext);
        if (fs::exists(cand)) {
          label_path = cand;
          found = true;
          break;
        }
      }
      if (!found) throw DataError("no label file for image id '" + id + "'");
    }
    GrayImage img = read_gray(img_path.string());
    GrayImage lbl = read_gray(label_path.string());
    if (img.height != img.width)
      throw DataError("image '" + id + "' is not square: " + std::to_string(img.height) + "x" +
                      std::to_string(img.width));
    if (lbl.height != img.height || lbl.width != img.width)
      throw DataError("label size mismatch for image '" + id + "'");
    if (img.height % tile_size)
      throw DataError("image '" + id + "' side " + std::to_string(img.height) +
                      " not divisible by tile size " + std::to_string(tile_size));

    const int per_side = img.height / tile_size;
    for (int tr = 0; tr < per_side; ++tr)
      for (int tc = 0; tc < per_side; ++tc) {
        LabeledTile t;
        t.image_id = id;
        t.tile_row = tr;
        t.tile_col = tc;
        t.size = tile_size;
        t.image.resize(static_cast<size_t>(tile_size) * tile_size);
        t.labels.resize(t.image.size());
        for (int h = 0; h < tile_size; ++h)
          for (int w = 0; w < tile_size; ++w) {
            const int sh = tr * tile_size + h, sw = tc * tile_size + w;
            t.image[static_cast<size_t>(h) * tile_size + w] = img.at(sh, sw) / 255.0f;
            const int raw = lbl.at(sh, sw);
            const int cls = remap[raw];
            if (cls < 0)
              throw DataError("unknown label value " + std::to_string(raw) + " in image '" + id +
                              "' at pixel (" + std::to_string(sh) + "," + std::to_string(sw) +
                              ")");
            t.labels[static_cast<size_t>(h) * tile_size + w] = static_cast<std::uint8_t>(cls);
          }
        tiles.push_back(std::move(t));
      }
  }
  return tiles;
}

FoldAssignment make_folds(int n_tiles, int n_folds, std::uint64_t seed, int n_train,
                          int n_val, int n_test) {
  if (n_train + n_val + n_test != n_tiles)
    throw ConfigError("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_val) +
                      "+" + std::to_string(n_test) + " do not sum to tile count " +
                      std::to_string(n_tiles));
  if (n_folds < 1) throw ConfigError("n_folds must be >= 1");
  std::mt19937_64 rng(seed);
  FoldAssignment fa;
  for (int f = 0; f < n_folds; ++f) {
    std::vector<int> idx(n_tiles);
    for (int i = 0; i < n_tiles; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Role> roles(n_tiles, Role::Train);
    for (int i = 0; i < n_tiles; ++i) {
      if (i < n_train)
        roles[idx[i]] = Role::Train;
      else if (i < n_train + n_val)
        roles[idx[i]] = Role::Val;
      else
        roles[idx[i]] = Role::Test;
    }
    fa.roles.push_back(std::move(roles));
  }
  return fa;
}

namespace {

// Class layout: 0 membrane-like curves, 1 blob interiors, 2 small dots,
// 3 background. Later strokes overwrite earlier ones.
constexpr float kClassIntensity[kNumClasses] = {0.10f, 0.45f, 0.85f, 0.60f};

void draw_disc(std::vector<std::uint8_t>& lbl, int size, int ch, int cw, int radius,
               std::uint8_t cls) {
  for (int h = std::max(0, ch - radius); h <= std::min(size - 1, ch + radius); ++h)
    for (int w = std::max(0, cw - radius); w <= std::min(size - 1, cw + radius); ++w)
      if ((h - ch) * (h - ch) + (w - cw) * (w - cw) <= radius * radius)
        lbl[static_cast<size_t>(h) * size + w] = cls;
}

}  // namespace

std::vector<LabeledTile> synth_generate(int n_images, int size, std::uint64_t seed) {
  if (n_images < 1 || size < 8) throw ConfigError("synth_generate: need n>=1 and size>=8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);

  std::vector<LabeledTile> tiles;
  for (int n = 0; n < n_images; ++n) {
    LabeledTile t;
    t.image_id = "synth" + std::to_string(n);
    t.size = size;
    t.labels.assign(static_cast<size_t>(size) * size, 3);
    t.image.resize(t.labels.size());

    // Blobs (class 1).
    const int n_blobs = std::max(2, size * size / 1024);
    for (int b = 0; b < n_blobs; ++b) {
      const int r = std::max(2, static_cast<int>((0.06 + 0.06 * unif(rng)) * size));
      draw_disc(t.labels, size, static_cast<int>(unif(rng) * size),
                static_cast<int>(unif(rng) * size), r, 1);
    }
    // Curves (class 0): sinusoidal strokes spanning the width.
    const int n_curves = 3;
    for (int c = 0; c < n_curves; ++c) {
      const double base = unif(rng) * size;
      const double amp = (0.05 + 0.15 * unif(rng)) * size;
      const double freq = (1.0 + 2.0 * unif(rng)) * 2.0 * 3.14159265358979 / size;
      const double phase = unif(rng) * 6.28318530717959;
      for (int w = 0; w < size; ++w) {
        const int hc = static_cast<int>(base + amp * std::sin(freq * w + phase));
        for (int dh = -1; dh <= 1; ++dh) {
          const int h = hc + dh;
          if (h >= 0 && h < size) t.labels[static_cast<size_t>(h) * size + w] = 0;
        }
      }
    }
    // Dots (class 2).
    const int n_dots = std::max(4, size * size / 300);
    for (int d = 0; d < n_dots; ++d)
      draw_disc(t.labels, size, static_cast<int>(unif(rng) * size),
                static_cast<int>(unif(rng) * size), 1 + (d % 2), 2);

    for (size_t i = 0; i < t.labels.size(); ++i) {
      const double v = kClassIntensity[t.labels[i]] + noise(rng);
      t.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    tiles.push_back(std::move(t));
  }
  return tiles;
}

std::vector<TileRecord> build_records(const std::vector<LabeledTile>& tiles,
                                      const FoldAssignment& folds) {
  std::vector<TileRecord> recs;
  for (int f = 0; f < folds.n_folds(); ++f) {
    if (folds.roles[f].size() != tiles.size())
      throw ConfigError("fold assignment does not match tile count");
    for (size_t i = 0; i < tiles.size(); ++i)
      recs.push_back({tiles[i].image_id, tiles[i].tile_row, tiles[i].tile_col, f,
                      folds.roles[f][i]});
  }
  return recs;
}

void save_index_csv(const std::string& path, const std::vector<TileRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write index: " + path);
  out << "image_id,tile_row,tile_col,fold,role\n";
  for (const auto& r : records)
    out << r.image_id << "," << r.tile_row << "," << r.tile_col << "," << r.fold << ","
        << to_string(r.role) << "\n";
}

std::vector<TileRecord> load_index_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read index: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "image_id,tile_row,tile_col,fold,role")
    throw DataError("bad index header in " + path);
  std::vector<TileRecord> recs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    TileRecord r;
    std::string field;
    std::getline(ss, r.image_id, ',');
    std::getline(ss, field, ',');
    r.tile_row = std::stoi(field);
    std::getline(ss, field, ',');
    r.tile_col = std::stoi(field);
    std::getline(ss, field, ',');
    r.fold = std::stoi(field);
    std::getline(ss, field, ',');
    r.role = parse_role(field);
    recs.push_back(std::move(r));
  }
  return recs;
}

Normalization compute_normalization(const std::vector<LabeledTile>& tiles,
                                    const std::vector<int>& indices) {
  double sum = 0.0, sq = 0.0;
  std::int64_t count = 0;
  for (int i : indices) {
    for (float v : tiles[i].image) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++count;
    }
  }
  if (count == 0) throw UsageError("compute_normalization: empty selection");
  const double mean = sum / count;
  const double var = std::max(0.0, sq / count - mean * mean);
  return {static_cast<float>(mean), static_cast<float>(std::sqrt(var) + 1e-8)};
}

}  // namespace fbseg
