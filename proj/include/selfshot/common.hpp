#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace selfshot {

// Validation errors map to CLI exit code 1, runtime failures to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] void fail_validation(const std::string& msg);
[[noreturn]] void fail_runtime(const std::string& msg);

#define SS_CHECK(cond, msg)                            \
  do {                                                 \
    if (!(cond)) ::selfshot::fail_validation((msg));   \
  } while (0)

#define SS_REQUIRE(cond, msg)                          \
  do {                                                 \
    if (!(cond)) ::selfshot::fail_runtime((msg));      \
  } while (0)

// --- fingerprints -----------------------------------------------------------

// FNV-1a over bytes; used for artifact fingerprints and config hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ull);
std::string to_hex(std::uint64_t v);
std::string fingerprint_file(const std::string& path);

// --- seeded randomness ------------------------------------------------------

// SplitMix64. All stochastic choices flow through named streams derived from a
// root seed, so reruns with the same seeds reproduce every artifact.
class SeedStream {
 public:
  SeedStream(std::uint64_t root_seed, std::string_view name);
  explicit SeedStream(std::uint64_t raw_state) : state_(raw_state) {}

  std::uint64_t next_u64();
  // uniform in [0, 1)
  double next_double();
  // uniform integer in [lo, hi] inclusive
  std::int64_t next_int(std::int64_t lo, std::int64_t hi);
  // standard normal via Box-Muller
  double next_normal();
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// --- deterministic parallelism ----------------------------------------------

// Runs fn(begin, end) over fixed-size chunks. Chunk boundaries depend only on
// `n` and `chunk`, never on the worker count, so any reduction done per chunk
// and combined in chunk order is bit-reproducible across thread settings.
void parallel_chunks(std::int64_t n, std::int64_t chunk,
                     const std::function<void(std::int64_t, std::int64_t)>& fn);
int worker_count();
void set_worker_count(int n);

// --- small file helpers -----------------------------------------------------

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);
std::vector<std::uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const void* data, std::size_t n);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

}  // namespace selfshot
