// Copyright 2026 The CORAL Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "coral/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "coral/cord_io.hpp"
#include "coral/errors.hpp"
#include "coral/rng.hpp"

namespace coral {

namespace {

// Values are stored at float precision so CORD export is lossless.
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Rect {
  int y0, x0, h, w;
  bool contains(const Coord& c) const {
    return c.y >= y0 && c.y < y0 + h && c.x >= x0 && c.x < x0 + w;
  }
};

BinaryMask rect_mask(GridShape shape, const Rect& r) {
  BinaryMask m(shape.height, shape.width);
  for (int y = r.y0; y < r.y0 + r.h; ++y) {
    for (int x = r.x0; x < r.x0 + r.w; ++x) m.set(y, x, true);
  }
  return m;
}

BinaryMask dilate(const BinaryMask& m) {
  BinaryMask out = m;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m(y, x)) continue;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const Coord n{y + dy, x + dx};
          if (m.shape().contains(n)) out.set(n, true);
        }
      }
    }
  }
  return out;
}

// Hungarian algorithm (potentials form) on a dense n x n cost; returns the
// column assigned to each row.
template <typename Cost>
std::vector<int> min_cost_assignment(int n, Cost cost) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<uint8_t> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n);
  for (int j = 1; j <= n; ++j) out[match[j] - 1] = j - 1;
  return out;
}

// Relative-rectangle bijection: person-relative cell k -> garment-relative
// continuous target (before rounding) and integer cell.
struct RelativeMap {
  std::vector<Point2> continuous;
  std::vector<Coord> cell;
};

RelativeMap relative_map(const TaskSpec& spec, int rh, int rw, Rng& rng) {
  const int n = rh * rw;
  RelativeMap map;
  map.continuous.resize(n);
  map.cell.resize(n);
  const GridShape rel{rh, rw};
  switch (spec.warp) {
    case WarpKind::kIdentity:
      for (int k = 0; k < n; ++k) map.cell[k] = rel.coord(k);
      break;
    case WarpKind::kPermutation: {
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      for (int k = 0; k < n; ++k) map.cell[k] = rel.coord(perm[k]);
      break;
    }
    case WarpKind::kBlockShuffle: {
      const int b = spec.block_size;
      const int by = rh / b;
      const int bx = rw / b;
      std::vector<int> blocks(by * bx);
      std::iota(blocks.begin(), blocks.end(), 0);
      std::shuffle(blocks.begin(), blocks.end(), rng.engine());
      for (int k = 0; k < n; ++k) {
        const Coord c = rel.coord(k);
        const int cy = c.y / b;
        const int cx = c.x / b;
        if (cy < by && cx < bx) {
          const int dst = blocks[cy * bx + cx];
          map.cell[k] = {(dst / bx) * b + c.y % b, (dst % bx) * b + c.x % b};
        } else {
          map.cell[k] = c;  // partial edge tiles stay in place
        }
      }
      break;
    }
    case WarpKind::kSmoothWarp: {
      const double amp = 0.15 * std::min(rh, rw);
      const double py = rng.uniform() * 2.0 * M_PI;
      const double px = rng.uniform() * 2.0 * M_PI;
      std::vector<Point2> target(n);
      for (int k = 0; k < n; ++k) {
        const Coord c = rel.coord(k);
        const double v = rh > 1 ? double(c.y) / (rh - 1) : 0.0;
        const double u = rw > 1 ? double(c.x) / (rw - 1) : 0.0;
        target[k] = {std::clamp(c.y + amp * std::sin(2.0 * M_PI * u + py), 0.0, double(rh - 1)),
                     std::clamp(c.x + amp * std::sin(2.0 * M_PI * v + px), 0.0, double(rw - 1))};
      }
      // Bijective rounding: minimum total squared displacement assignment.
      const std::vector<int> assignment = min_cost_assignment(n, [&](int k, int m) {
        return squared_distance(to_point(rel.coord(m)), target[k]);
      });
      for (int k = 0; k < n; ++k) map.cell[k] = rel.coord(assignment[k]);
      map.continuous = target;
      return map;
    }
  }
  for (int k = 0; k < n; ++k) map.continuous[k] = to_point(map.cell[k]);
  return map;
}

void fill_normal(LatentGrid& g, Rng& rng) {
  for (double& v : g.data()) v = f32(rng.normal());
}

DescriptorGrid noisy_copy(const LatentGrid& g, double sigma, Rng& rng) {
  DescriptorGrid d = g;
  for (double& v : d.data()) v = f32(v + sigma * rng.normal());
  return d;
}

}  // namespace

const char* warp_name(WarpKind kind) {
  switch (kind) {
    case WarpKind::kIdentity: return "identity";
    case WarpKind::kPermutation: return "permutation";
    case WarpKind::kBlockShuffle: return "block-shuffle";
    case WarpKind::kSmoothWarp: return "smooth-warp";
  }
  return "?";
}

WarpKind parse_warp(const std::string& name) {
  for (auto k : {WarpKind::kIdentity, WarpKind::kPermutation, WarpKind::kBlockShuffle,
                 WarpKind::kSmoothWarp}) {
    if (name == warp_name(k)) return k;
  }
  throw ConfigError("unknown warp kind '" + name + "'");
}

void TaskSpec::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) throw DimensionError("degenerate task grid");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw RangeError("sigma must be >= 0");
  if (!(density > 0.0 && density <= 1.0)) throw RangeError("density must lie in (0, 1]");
  if (block_size <= 0) throw ConfigError("block size must be positive");
}

SyntheticTask generate_task(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const GridShape panel{spec.height, spec.width};

  const double side = std::sqrt(spec.density);
  const int rh = std::clamp(static_cast<int>(std::lround(spec.height * side)), 1, spec.height);
  const int rw = std::clamp(static_cast<int>(std::lround(spec.width * side)), 1, spec.width);
  const Rect garment_rect{rng.uniform_int(0, spec.height - rh), rng.uniform_int(0, spec.width - rw),
                          rh, rw};
  Rect person_rect{rng.uniform_int(0, spec.height - rh), rng.uniform_int(0, spec.width - rw), rh,
                   rw};
  if (spec.warp == WarpKind::kIdentity) person_rect = garment_rect;

  SyntheticTask task;
  task.spec = spec;
  task.garment_mask = rect_mask(panel, garment_rect);
  task.person_mask = rect_mask(panel, person_rect);
  task.edit_mask = dilate(task.person_mask);

  task.garment = LatentGrid(spec.height, spec.width, spec.channels);
  task.person = LatentGrid(spec.height, spec.width, spec.channels);
  fill_normal(task.garment, rng);
  fill_normal(task.person, rng);

  const RelativeMap rel = relative_map(spec, rh, rw, rng);
  const GridShape rel_shape{rh, rw};
  for (int k = 0; k < rh * rw; ++k) {
    const Coord pr = rel_shape.coord(k);
    const Coord q{person_rect.y0 + pr.y, person_rect.x0 + pr.x};
    const Coord m{garment_rect.y0 + rel.cell[k].y, garment_rect.x0 + rel.cell[k].x};
    const auto src = task.garment.at(m);
    std::copy(src.begin(), src.end(), task.person.at(q).begin());
  }
  // Truth in row-major person order (rectangle order is already row-major).
  for (int k = 0; k < rh * rw; ++k) {
    const Coord pr = rel_shape.coord(k);
    const Coord q{person_rect.y0 + pr.y, person_rect.x0 + pr.x};
    task.truth.entries.push_back(
        {q, {double(garment_rect.y0 + rel.cell[k].y), double(garment_rect.x0 + rel.cell[k].x)}, true});
    task.subcell_truth.push_back(
        {garment_rect.y0 + rel.continuous[k].y, garment_rect.x0 + rel.continuous[k].x});
  }

  task.pose = LatentGrid(spec.height, spec.width, spec.channels);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      task.pose(y, x, 0) = task.person_mask(y, x) ? 1.0 : 0.0;
      if (spec.channels > 1) task.pose(y, x, 1) = task.edit_mask(y, x) ? 1.0 : 0.0;
    }
  }

  task.garment_descriptors = noisy_copy(task.garment, spec.sigma, rng);
  task.person_descriptors = noisy_copy(task.person, spec.sigma, rng);
  return task;
}

std::vector<SyntheticTask> generate_task_set(const TaskSpec& spec, int count) {
  std::vector<SyntheticTask> tasks;
  tasks.reserve(count);
  for (int i = 0; i < count; ++i) {
    TaskSpec s = spec;
    s.seed = splitmix64(spec.seed * 1000003ULL + static_cast<uint64_t>(i));
    tasks.push_back(generate_task(s));
  }
  return tasks;
}

double chance_pck(const BinaryMask& garment_mask, const CorrespondenceSet& gt, double alpha) {
  const auto cells = garment_mask.locations();
  if (cells.empty()) throw EmptyDomainError("chance_pck: empty garment mask");
  double sum = 0.0;
  int n = 0;
  for (const auto& e : gt.entries) {
    if (!e.reliable) continue;
    int hits = 0;
    for (const auto& c : cells) hits += distance(to_point(c), e.match) < alpha ? 1 : 0;
    sum += static_cast<double>(hits) / cells.size();
    ++n;
  }
  if (n == 0) throw EmptyDomainError("chance_pck: no reliable queries");
  return sum / n;
}

namespace {

const std::vector<std::pair<std::string, std::string>> kGridFiles = {
    {"garment", "garment.cord"},
    {"person", "person.cord"},
    {"pose", "pose.cord"},
    {"garment_descriptors", "garment_desc.cord"},
    {"person_descriptors", "person_desc.cord"},
    {"garment_mask", "garment_mask.cord"},
    {"person_mask", "person_mask.cord"},
    {"edit_mask", "edit_mask.cord"},
};

}  // namespace

nlohmann::json task_manifest(const SyntheticTask& task) {
  nlohmann::json j;
  j["schema"] = "coral.task";
  j["schema_version"] = kTaskSchemaVersion;
  j["seed"] = task.spec.seed;
  j["height"] = task.spec.height;
  j["width"] = task.spec.width;
  j["channels"] = task.spec.channels;
  j["warp"] = warp_name(task.spec.warp);
  j["sigma"] = task.spec.sigma;
  j["density"] = task.spec.density;
  j["block_size"] = task.spec.block_size;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [key, file] : kGridFiles) files[key] = file;
  j["files"] = files;
  auto corr = nlohmann::json::array();
  for (size_t i = 0; i < task.truth.entries.size(); ++i) {
    const auto& e = task.truth.entries[i];
    corr.push_back({{"query", {e.query.y, e.query.x}},
                    {"match", {e.match.y, e.match.x}},
                    {"subcell", {task.subcell_truth[i].y, task.subcell_truth[i].x}}});
  }
  j["correspondences"] = corr;
  return j;
}

void validate_manifest(const nlohmann::json& m) {
  auto fail = [](const std::string& why) { throw FormatError("task manifest: " + why); };
  if (!m.is_object()) fail("not an object");
  if (m.value("schema", "") != "coral.task") fail("schema must be 'coral.task'");
  if (!m.contains("schema_version") || !m["schema_version"].is_number_integer() ||
      m["schema_version"].get<int>() != kTaskSchemaVersion) {
    fail("unsupported schema_version");
  }
  for (const char* key : {"height", "width", "channels", "block_size"}) {
    if (!m.contains(key) || !m[key].is_number_integer() || m[key].get<int>() <= 0) {
      fail(std::string("'") + key + "' must be a positive integer");
    }
  }
  if (!m.contains("seed") || !m["seed"].is_number_unsigned()) fail("'seed' must be unsigned");
  for (const char* key : {"sigma", "density"}) {
    if (!m.contains(key) || !m[key].is_number()) fail(std::string("'") + key + "' must be numeric");
  }
  if (!m.contains("warp") || !m["warp"].is_string()) fail("'warp' must be a string");
  try {
    parse_warp(m["warp"].get<std::string>());
  } catch (const ConfigError& e) {
    fail(e.what());
  }
  if (!m.contains("files") || !m["files"].is_object()) fail("'files' must be an object");
  for (const auto& [key, file] : kGridFiles) {
    if (!m["files"].contains(key) || !m["files"][key].is_string()) fail("missing file '" + key + "'");
  }
  if (!m.contains("correspondences") || !m["correspondences"].is_array()) {
    fail("'correspondences' must be an array");
  }
  const int h = m["height"].get<int>();
  const int w = m["width"].get<int>();
  for (const auto& e : m["correspondences"]) {
    for (const char* key : {"query", "match", "subcell"}) {
      if (!e.contains(key) || !e[key].is_array() || e[key].size() != 2) {
        fail(std::string("correspondence field '") + key + "' must be a pair");
      }
    }
    const int qy = e["query"][0].get<int>();
    const int qx = e["query"][1].get<int>();
    if (qy < 0 || qy >= h || qx < 0 || qx >= w) fail("query outside grid");
  }
}

void export_task(const SyntheticTask& task, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  const auto manifest = task_manifest(task);
  write_cord(directory / "garment.cord", task.garment);
  write_cord(directory / "person.cord", task.person);
  write_cord(directory / "pose.cord", task.pose);
  write_cord(directory / "garment_desc.cord", task.garment_descriptors);
  write_cord(directory / "person_desc.cord", task.person_descriptors);
  write_mask(directory / "garment_mask.cord", task.garment_mask);
  write_mask(directory / "person_mask.cord", task.person_mask);
  write_mask(directory / "edit_mask.cord", task.edit_mask);
  std::ofstream out(directory / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + directory.string());
  out << manifest.dump(2) << "\n";
}

SyntheticTask import_task(const std::filesystem::path& directory) {
  std::ifstream in(directory / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + directory.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task manifest is not JSON: ") + e.what());
  }
  validate_manifest(m);

  SyntheticTask task;
  task.spec.seed = m["seed"].get<uint64_t>();
  task.spec.height = m["height"].get<int>();
  task.spec.width = m["width"].get<int>();
  task.spec.channels = m["channels"].get<int>();
  task.spec.warp = parse_warp(m["warp"].get<std::string>());
  task.spec.sigma = m["sigma"].get<double>();
  task.spec.density = m["density"].get<double>();
  task.spec.block_size = m["block_size"].get<int>();

  const auto& files = m["files"];
  auto grid = [&](const char* key) {
    return read_cord(directory / files[key].get<std::string>());
  };
  auto mask = [&](const char* key) {
    return read_mask(directory / files[key].get<std::string>());
  };
  task.garment = grid("garment");
  task.person = grid("person");
  task.pose = grid("pose");
  task.garment_descriptors = grid("garment_descriptors");
  task.person_descriptors = grid("person_descriptors");
  task.garment_mask = mask("garment_mask");
  task.person_mask = mask("person_mask");
  task.edit_mask = mask("edit_mask");
  const GridShape panel{task.spec.height, task.spec.width};
  for (const DescriptorGrid* g : {&task.garment, &task.person, &task.pose,
                                  &task.garment_descriptors, &task.person_descriptors}) {
    if (g->shape() != panel || g->channels() != task.spec.channels) {
      throw FormatError("task grid does not match manifest shape");
    }
  }
  for (const auto& e : m["correspondences"]) {
    task.truth.entries.push_back({{e["query"][0].get<int>(), e["query"][1].get<int>()},
                                  {e["match"][0].get<double>(), e["match"][1].get<double>()},
                                  true});
    task.subcell_truth.push_back({e["subcell"][0].get<double>(), e["subcell"][1].get<double>()});
  }
  return task;
}

}  // namespace coral
