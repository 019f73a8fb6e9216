#include "gemlab/scene.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace {

struct BoxShape {
  double cx, cy, hx, hy, h;
};

struct SphereShape {
  double cx, cy, radius;
};

constexpr double kWallHeight = 1.0;
constexpr std::size_t kNormalNeighbours = 8;

std::array<double, 3> sample_box(const std::vector<BoxShape>& boxes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> areas;
  for (const auto& b : boxes)
    areas.push_back(4 * b.hx * b.hy + 4 * b.hx * b.h + 4 * b.hy * b.h);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  const auto& b = boxes[pick(rng)];
  // Faces: top, +x, -x, +y, -y (no bottom).
  std::array<double, 5> face_area{4 * b.hx * b.hy, 2 * b.hy * b.h, 2 * b.hy * b.h, 2 * b.hx * b.h,
                                  2 * b.hx * b.h};
  std::discrete_distribution<int> face(face_area.begin(), face_area.end());
  const double s = u(rng) * 2 - 1, t = u(rng);
  switch (face(rng)) {
    case 0: return {b.cx + s * b.hx, b.cy + (u(rng) * 2 - 1) * b.hy, b.h};
    case 1: return {b.cx + b.hx, b.cy + s * b.hy, t * b.h};
    case 2: return {b.cx - b.hx, b.cy + s * b.hy, t * b.h};
    case 3: return {b.cx + s * b.hx, b.cy + b.hy, t * b.h};
    default: return {b.cx + s * b.hx, b.cy - b.hy, t * b.h};
  }
}

std::array<double, 3> sample_sphere(const std::vector<SphereShape>& spheres, std::mt19937_64& rng) {
  std::vector<double> areas;
  for (const auto& s : spheres) areas.push_back(s.radius * s.radius);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  const auto& s = spheres[pick(rng)];
  std::normal_distribution<double> g(0.0, 1.0);
  double x = g(rng), y = g(rng), z = g(rng);
  double norm = std::sqrt(x * x + y * y + z * z);
  if (norm == 0.0) return {s.cx, s.cy, 2 * s.radius};
  return {s.cx + s.radius * x / norm, s.cy + s.radius * y / norm, s.radius + s.radius * z / norm};
}

std::array<double, 3> estimate_normal(const std::vector<double>& xyz, std::size_t i) {
  const std::size_t n = xyz.size() / 3;
  if (n < 3) return {0.0, 0.0, 1.0};
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = 0;
    for (int a = 0; a < 3; ++a) d += (xyz[3 * i + a] - xyz[3 * j + a]) * (xyz[3 * i + a] - xyz[3 * j + a]);
    dist.emplace_back(d, j);
  }
  const std::size_t k = std::min(n, kNormalNeighbours + 1);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  Eigen::Vector3d mu = Eigen::Vector3d::Zero();
  for (std::size_t t = 0; t < k; ++t) mu += Eigen::Vector3d(&xyz[3 * dist[t].second]);
  mu /= static_cast<double>(k);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (std::size_t t = 0; t < k; ++t) {
    Eigen::Vector3d d = Eigen::Vector3d(&xyz[3 * dist[t].second]) - mu;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Vector3d nrm = eig.eigenvectors().col(0);
  return {std::abs(nrm.x()), std::abs(nrm.y()), std::abs(nrm.z())};
}

std::string timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

Primitive parse_primitive(const std::string& name) {
  if (name == "floor") return Primitive::Floor;
  if (name == "wall") return Primitive::Wall;
  if (name == "box") return Primitive::Box;
  if (name == "sphere") return Primitive::Sphere;
  throw ConfigError("unknown primitive '" + name + "' (expected floor, wall, box, sphere)");
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Floor: return "floor";
    case Primitive::Wall: return "wall";
    case Primitive::Box: return "box";
    case Primitive::Sphere: return "sphere";
  }
  return "?";
}

SceneSpec SceneSpec::from_kv(const KeyValues& kv) {
  SceneSpec spec;
  for (const auto& c : kv.get_list("classes")) spec.classes.push_back(parse_primitive(c));
  for (const auto& p : kv.get_list("points_per_class")) {
    auto v = parse_int(p);
    if (v < 0) throw ConfigError("points_per_class entries must be non-negative");
    spec.points_per_class.push_back(static_cast<std::size_t>(v));
  }
  if (spec.points_per_class.size() == 1 && spec.classes.size() > 1)
    spec.points_per_class.assign(spec.classes.size(), spec.points_per_class[0]);
  if (kv.has("labels"))
    for (const auto& l : kv.get_list("labels")) spec.labels.push_back(static_cast<int>(parse_int(l)));
  spec.noise_sigma = kv.get_double("noise_sigma");
  spec.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  if (kv.has("scale")) spec.scale = kv.get_double("scale");
  if (kv.has("room_size")) spec.room_size = kv.get_double("room_size");
  if (spec.labels.empty())
    for (std::size_t i = 0; i < spec.classes.size(); ++i) spec.labels.push_back(static_cast<int>(i));
  if (kv.has("num_classes")) {
    spec.num_classes = static_cast<std::size_t>(kv.get_int("num_classes"));
  } else if (!spec.labels.empty()) {
    spec.num_classes = static_cast<std::size_t>(*std::ranges::max_element(spec.labels) + 1);
  }
  spec.validate();
  return spec;
}

KeyValues SceneSpec::to_kv() const {
  KeyValues kv;
  std::string cls, pts, lab;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    cls += (i ? "," : "") + primitive_name(classes[i]);
    pts += (i ? "," : "") + std::to_string(points_per_class[i]);
    lab += (i ? "," : "") + std::to_string(labels[i]);
  }
  kv.set("classes", cls);
  kv.set("points_per_class", pts);
  kv.set("labels", lab);
  kv.set("num_classes", num_classes);
  kv.set("noise_sigma", noise_sigma);
  kv.set("scale", scale);
  kv.set("room_size", room_size);
  kv.set("seed", static_cast<long long>(seed));
  return kv;
}

void SceneSpec::validate() const {
  if (classes.empty()) throw ArgumentError("scene spec lists no classes");
  if (points_per_class.size() != classes.size())
    throw ConfigError("points_per_class has " + std::to_string(points_per_class.size()) +
                      " entries for " + std::to_string(classes.size()) + " classes");
  if (labels.size() != classes.size()) throw ConfigError("labels must have one entry per class");
  std::size_t total = 0;
  for (auto p : points_per_class) total += p;
  if (total == 0) throw ArgumentError("scene spec has an empty point budget");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
      throw ConfigError("label " + std::to_string(l) + " outside [0, num_classes)");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (!(scale > 0.0) || !(room_size > 0.0)) throw ConfigError("scale and room_size must be positive");
}

SceneSpec source_scene_spec(std::size_t points_per_class) {
  SceneSpec s;
  s.classes = {Primitive::Floor, Primitive::Wall, Primitive::Box};
  s.points_per_class.assign(3, points_per_class);
  s.labels = {0, 1, 2};
  s.num_classes = 3;
  s.noise_sigma = 0.01;
  s.scale = 1.0;
  s.seed = 1;
  return s;
}

SceneSpec target_scene_spec(std::size_t points_per_class) {
  SceneSpec s;
  s.classes = {Primitive::Floor, Primitive::Wall, Primitive::Box, Primitive::Sphere};
  s.points_per_class.assign(4, points_per_class);
  s.labels = {0, 1, 2, 2};
  s.num_classes = 3;
  s.noise_sigma = 0.03;
  s.scale = 1.5;
  s.seed = 2;
  return s;
}

PointCloud generate_scene(std::uint64_t seed, const SceneSpec& recipe) {
  SceneSpec spec = recipe;
  if (spec.labels.empty())
    for (std::size_t i = 0; i < spec.classes.size(); ++i) spec.labels.push_back(static_cast<int>(i));
  if (spec.num_classes == 0 && !spec.labels.empty())
    spec.num_classes = static_cast<std::size_t>(*std::ranges::max_element(spec.labels) + 1);
  spec.validate();
  auto layout_rng = make_stream(seed, "layout");
  auto point_rng = make_stream(seed, "points");
  auto noise_rng = make_stream(seed, "noise");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double R = spec.room_size;
  auto in_room = [&](double margin) { return margin + u(layout_rng) * (R - 2 * margin); };

  std::vector<BoxShape> boxes(1 + layout_rng() % 3);
  for (auto& b : boxes)
    b = {in_room(0.45), in_room(0.45), 0.1 + 0.2 * u(layout_rng), 0.1 + 0.2 * u(layout_rng),
         0.2 + 0.4 * u(layout_rng)};
  std::vector<SphereShape> spheres(1 + layout_rng() % 2);
  for (auto& s : spheres) s = {in_room(0.45), in_room(0.45), 0.15 + 0.15 * u(layout_rng)};

  PointCloud cloud;
  cloud.num_classes = spec.num_classes;
  cloud.channels = 6;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    for (std::size_t k = 0; k < spec.points_per_class[c]; ++k) {
      std::array<double, 3> p{};
      switch (spec.classes[c]) {
        case Primitive::Floor: p = {u(point_rng) * R, u(point_rng) * R, 0.0}; break;
        case Primitive::Wall:
          if (u(point_rng) < 0.5) p = {0.0, u(point_rng) * R, u(point_rng) * kWallHeight};
          else p = {u(point_rng) * R, 0.0, u(point_rng) * kWallHeight};
          break;
        case Primitive::Box: p = sample_box(boxes, point_rng); break;
        case Primitive::Sphere: p = sample_sphere(spheres, point_rng); break;
      }
      p[0] -= 0.5 * R;
      p[1] -= 0.5 * R;
      for (double& v : p) v = v * spec.scale + spec.noise_sigma * noise(noise_rng);
      cloud.coords.insert(cloud.coords.end(), p.begin(), p.end());
      cloud.labels.push_back(spec.labels[c]);
    }
  }
  const std::size_t n = cloud.size();
  cloud.feats.reserve(n * 6);
  for (std::size_t i = 0; i < n; ++i) {
    auto nrm = estimate_normal(cloud.coords, i);
    cloud.feats.insert(cloud.feats.end(), cloud.coords.begin() + 3 * i, cloud.coords.begin() + 3 * i + 3);
    cloud.feats.insert(cloud.feats.end(), nrm.begin(), nrm.end());
  }
  cloud.validate();
  return cloud;
}

std::uint64_t scene_seed(std::uint64_t master_seed, std::size_t index) {
  return make_stream(master_seed, "data." + std::to_string(index))();
}

Dataset generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t master_seed) {
  if (count == 0) throw ArgumentError("dataset count must be positive");
  Dataset data;
  data.spec_hash = spec.to_kv().hash();
  for (std::size_t i = 0; i < count; ++i) {
    auto s = scene_seed(master_seed ^ spec.seed, i);
    data.seeds.push_back(s);
    data.clouds.push_back(generate_scene(s, spec));
    std::ostringstream name;
    name << "scene_" << std::setw(4) << std::setfill('0') << i << ".pc";
    data.files.push_back(name.str());
  }
  return data;
}

void write_dataset(const std::string& dir, const Dataset& data, const std::string& command) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(std::filesystem::path(dir) / "manifest.txt");
  if (!manifest) throw ArgumentError("cannot write manifest in '" + dir + "'");
  manifest << "#manifest spec-hash " << data.spec_hash << " count " << data.clouds.size()
           << " created " << timestamp() << "\n";
  manifest << "#command " << command << "\n";
  for (std::size_t i = 0; i < data.clouds.size(); ++i) {
    write_point_cloud((std::filesystem::path(dir) / data.files[i]).string(), data.clouds[i]);
    manifest << data.files[i] << ' ' << data.seeds[i] << '\n';
  }
}

Dataset read_dataset(const std::string& dir) {
  auto path = std::filesystem::path(dir) / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw ArgumentError("no manifest.txt in dataset directory '" + dir + "'");
  Dataset data;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line);
      std::string tok;
      while (hs >> tok)
        if (tok == "spec-hash") hs >> data.spec_hash;
      continue;
    }
    std::istringstream ls(line);
    std::string file;
    std::uint64_t seed = 0;
    if (!(ls >> file >> seed)) throw DataError(path.string() + ": bad entry '" + line + "'");
    data.files.push_back(file);
    data.seeds.push_back(seed);
    data.clouds.push_back(read_point_cloud((std::filesystem::path(dir) / file).string()));
  }
  if (data.clouds.empty()) throw DataError(path.string() + ": dataset is empty");
  return data;
}

}  // namespace gemlab
