#include "mfbsde/noise.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mfbsde {

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t seed_digest(std::uint64_t seed) { return mix64(seed ^ 0x6A09E667F3BCC909ULL); }

}  // namespace

const char* role_name(Role role) {
  switch (role) {
    case Role::replication: return "replication";
    case Role::particle: return "particle";
    case Role::picard: return "picard";
    case Role::field: return "field";
    case Role::environment: return "environment";
    case Role::cloud: return "cloud";
    case Role::inner: return "inner";
    case Role::center: return "center";
    case Role::member: return "member";
    case Role::probe: return "probe";
    case Role::law: return "law";
    case Role::aux: return "aux";
  }
  return "?";
}

StreamKey::StreamKey(std::uint64_t s) : seed(s), digest_(seed_digest(s)) {}

bool StreamKey::is_prefix_of(const StreamKey& other) const {
  if (seed != other.seed || path.size() > other.path.size()) return false;
  for (std::size_t i = 0; i < path.size(); ++i)
    if (path[i] != other.path[i]) return false;
  return true;
}

std::string StreamKey::str() const {
  std::ostringstream os;
  os << seed;
  for (const auto& [role, index] : path) os << '/' << role_name(role) << ':' << index;
  return os.str();
}

std::uint64_t derive_digest(std::uint64_t parent, Role role, std::uint64_t index) {
  std::uint64_t h = mix64(parent ^ (kGamma * (static_cast<std::uint64_t>(role) + 1)));
  return mix64(h + mix64(index + 0xD1B54A32D192ED03ULL));
}

StreamKey derive_key(const StreamKey& parent, Role role, std::uint64_t index) {
  StreamKey child = parent;
  child.path.emplace_back(role, index);
  child.digest_ = derive_digest(parent.digest_, role, index);
  return child;
}

bool keys_disjoint(const StreamKey& a, const StreamKey& b) {
  return !a.is_prefix_of(b) && !b.is_prefix_of(a);
}

std::uint64_t Stream::next_u64() {
  state_ += kGamma;
  return mix64(state_);
}

double Stream::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Stream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t Stream::below(std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

TimeGrid::TimeGrid(double T, int n) : horizon(T), steps(n) {
  if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("time grid: horizon must be positive and finite");
  if (n < 1) throw std::invalid_argument("time grid: steps must be >= 1");
}

int TimeGrid::node_of(double time) const {
  double pos = time / h();
  int i = static_cast<int>(std::lround(pos));
  if (i < 0 || i > steps || std::abs(pos - i) > 1e-9 * steps)
    throw std::invalid_argument("time " + std::to_string(time) + " is not a grid node");
  return i;
}

std::vector<double> standard_normals(const StreamKey& key, std::size_t count) {
  std::vector<double> out(count);
  Stream s(key);
  for (auto& v : out) v = s.normal();
  return out;
}

void brownian_increments(std::uint64_t digest, const TimeGrid& grid, int dim, std::span<double> out) {
  if (out.size() != static_cast<std::size_t>(grid.steps) * dim)
    throw std::invalid_argument("brownian_increments: output size mismatch");
  Stream s(digest);
  double sh = std::sqrt(grid.h());
  for (auto& v : out) v = sh * s.normal();
}

std::vector<double> brownian_increments(const StreamKey& key, const TimeGrid& grid, int dim) {
  if (dim < 1) throw std::invalid_argument("brownian_increments: dim must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(grid.steps) * dim);
  brownian_increments(key.digest(), grid, dim, out);
  return out;
}

}  // namespace mfbsde
