#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mfbsde {

enum class Role : std::uint8_t {
  replication,
  particle,
  picard,
  field,
  environment,
  cloud,
  inner,
  center,
  member,
  probe,
  law,
  aux,
};

const char* role_name(Role role);

// Addresses one random stream. Equal (seed, path) always yields the same digest.
struct StreamKey {
  std::uint64_t seed = 0;
  std::vector<std::pair<Role, std::uint64_t>> path;

  StreamKey() = default;
  explicit StreamKey(std::uint64_t s);

  std::uint64_t digest() const { return digest_; }
  bool is_prefix_of(const StreamKey& other) const;
  std::string str() const;

  friend bool operator==(const StreamKey& a, const StreamKey& b) {
    return a.seed == b.seed && a.path == b.path;
  }

 private:
  std::uint64_t digest_ = 0;
  friend StreamKey derive_key(const StreamKey&, Role, std::uint64_t);
};

StreamKey derive_key(const StreamKey& parent, Role role, std::uint64_t index);

// Digest-level derivation, same result as derive_key(...).digest() without allocating.
std::uint64_t derive_digest(std::uint64_t parent, Role role, std::uint64_t index);

bool keys_disjoint(const StreamKey& a, const StreamKey& b);

// Counter-based stream: output k is a mix of (digest + (k + 1) * gamma).
class Stream {
 public:
  using result_type = std::uint64_t;

  explicit Stream(std::uint64_t digest) : state_(digest) {}
  explicit Stream(const StreamKey& key) : state_(key.digest()) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();
  double uniform();  // open interval (0, 1)
  double normal();
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct TimeGrid {
  double horizon = 1.0;
  int steps = 64;

  TimeGrid() = default;
  TimeGrid(double T, int n);

  double h() const { return horizon / steps; }
  double t(int i) const { return i == steps ? horizon : horizon * i / steps; }
  int nodes() const { return steps + 1; }
  int node_of(double time) const;  // nearest node, throws if off-grid by more than 1e-9
};

std::vector<double> standard_normals(const StreamKey& key, std::size_t count);

// Increments laid out [step][coord], each N(0, h).
std::vector<double> brownian_increments(const StreamKey& key, const TimeGrid& grid, int dim);
void brownian_increments(std::uint64_t digest, const TimeGrid& grid, int dim, std::span<double> out);

}  // namespace mfbsde
