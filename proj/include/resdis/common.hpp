#pragma once
// Shared vocabulary for the resdis pipeline: error types, matrix aliases,
// deterministic hashing/seeding and a tiny fork-join helper.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace resdis {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define RESDIS_DEFINE_ERROR(Name) \
  struct Name : Error {           \
    using Error::Error;           \
  }

RESDIS_DEFINE_ERROR(FormatError);
RESDIS_DEFINE_ERROR(CorruptError);
RESDIS_DEFINE_ERROR(IoError);
RESDIS_DEFINE_ERROR(ValidationError);
RESDIS_DEFINE_ERROR(IndexError);
RESDIS_DEFINE_ERROR(DegenerateLabelError);
RESDIS_DEFINE_ERROR(EmptyDatasetError);
RESDIS_DEFINE_ERROR(SingularError);
RESDIS_DEFINE_ERROR(ResamplingError);
RESDIS_DEFINE_ERROR(EmptySelectionError);
RESDIS_DEFINE_ERROR(InsufficientDataError);
RESDIS_DEFINE_ERROR(IncompleteError);
RESDIS_DEFINE_ERROR(SpecError);
RESDIS_DEFINE_ERROR(ConfigError);

#undef RESDIS_DEFINE_ERROR

/// Raised when a command runs before the command that produces its inputs.
struct DependencyError : Error {
  DependencyError(std::string producer, const std::string& what)
      : Error(what), producer_(std::move(producer)) {}
  const std::string& producer() const noexcept { return producer_; }

 private:
  std::string producer_;
};

// ---------------------------------------------------------------------------
// Hashing and seeds
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) noexcept {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) noexcept {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// splitmix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------

inline unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1U : hw;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must write
/// to disjoint outputs; callers reduce in index order afterwards, so results do
/// not depend on scheduling. The first exception thrown is rethrown.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1U, std::min<unsigned>(resolve_threads(threads),
                                            static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

/// 10 significant digits; identical bytes for identical doubles.
inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

/// Column means over rows.
inline RowVector col_means(const Eigen::Ref<const Matrix>& m) {
  if (m.rows() == 0) return RowVector::Zero(m.cols());
  return m.colwise().mean();
}

}  // namespace resdis
