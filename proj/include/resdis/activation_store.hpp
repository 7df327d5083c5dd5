#pragma once
// Token-aligned layer activations and the `.hdac` container.
//
// On-disk layout (all integers little-endian):
//
//   offset  size  field
//   0       6     magic "HDAC1\0"
//   6       2     u16 format version (1)
//   8       4     u32 layer count (slabs, layer 0 = embedding output)
//   12      4     u32 dim
//   16      8     u64 token count
//   24      4     u32 dtype code (1 = float32)
//   28      4     u32 reserved, zero
//   32      8     u64 FNV-1a hash of the corpus tag
//   40      8     u64 bytes per slab (tokens * dim * 4)
//   48      16    reserved, zero
//   64      ...   layer-major slabs, each tokens x dim row-major float32
//
// The token-alignment sidecar (`.align.tsv`) is a tab-separated table with the
// header `token_index	word_index	onset_s	is_final`.

#include "resdis/common.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

namespace resdis {

static_assert(std::endian::native == std::endian::little,
              ".hdac I/O assumes a little-endian host");

inline constexpr std::array<char, 6> kHdacMagic = {'H', 'D', 'A', 'C', '1', '\0'};
inline constexpr std::uint16_t kHdacVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::size_t kHdacHeaderSize = 64;

struct HdacHeader {
  std::uint32_t num_layers = 0;
  std::uint32_t dim = 0;
  std::uint64_t n_tokens = 0;
  std::uint32_t dtype = kDtypeFloat32;
  std::uint64_t corpus_hash = 0;

  std::uint64_t slab_values() const { return n_tokens * dim; }
  std::uint64_t slab_bytes() const { return slab_values() * sizeof(float); }
  std::uint64_t file_bytes() const { return kHdacHeaderSize + slab_bytes() * num_layers; }
};

namespace detail {

template <class T>
void put_le(std::array<unsigned char, kHdacHeaderSize>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof v);
}

template <class T>
T get_le(const unsigned char* buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf + off, sizeof v);
  return v;
}

inline std::array<unsigned char, kHdacHeaderSize> encode_header(const HdacHeader& h) {
  std::array<unsigned char, kHdacHeaderSize> buf{};
  std::memcpy(buf.data(), kHdacMagic.data(), kHdacMagic.size());
  put_le<std::uint16_t>(buf, 6, kHdacVersion);
  put_le<std::uint32_t>(buf, 8, h.num_layers);
  put_le<std::uint32_t>(buf, 12, h.dim);
  put_le<std::uint64_t>(buf, 16, h.n_tokens);
  put_le<std::uint32_t>(buf, 24, h.dtype);
  put_le<std::uint32_t>(buf, 28, 0);
  put_le<std::uint64_t>(buf, 32, h.corpus_hash);
  put_le<std::uint64_t>(buf, 40, h.slab_bytes());
  return buf;
}

inline HdacHeader decode_header(const unsigned char* buf) {
  if (std::memcmp(buf, kHdacMagic.data(), kHdacMagic.size()) != 0)
    throw FormatError("bad magic: not an .hdac file");
  if (auto v = get_le<std::uint16_t>(buf, 6); v != kHdacVersion)
    throw FormatError("unsupported .hdac version " + std::to_string(v));
  HdacHeader h;
  h.num_layers = get_le<std::uint32_t>(buf, 8);
  h.dim = get_le<std::uint32_t>(buf, 12);
  h.n_tokens = get_le<std::uint64_t>(buf, 16);
  h.dtype = get_le<std::uint32_t>(buf, 24);
  h.corpus_hash = get_le<std::uint64_t>(buf, 32);
  if (h.dtype != kDtypeFloat32)
    throw FormatError("dtype code " + std::to_string(h.dtype) + " is not float32");
  if (get_le<std::uint64_t>(buf, 40) != h.slab_bytes())
    throw FormatError("slab size field disagrees with tokens x dim");
  return h;
}

/// Read-only POSIX mapping of a whole file.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw IoError("cannot open " + path.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw IoError("cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        throw IoError("cannot map " + path.string());
      }
      data_ = static_cast<const unsigned char*>(p);
    }
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile() {
    if (data_ != nullptr) ::munmap(const_cast<unsigned char*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }

  const unsigned char* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return size_; }

 private:
  int fd_ = -1;
  const unsigned char* data_ = nullptr;
  std::size_t size_ = 0;
};

}  // namespace detail

/// Read-only view of one layer: n_tokens x dim, row-major float32.
class LayerSlice {
 public:
  using Map = Eigen::Map<const MatrixF>;

  LayerSlice(std::uint32_t layer, const float* data, Index rows, Index cols,
             std::shared_ptr<const void> keep)
      : layer_(layer), data_(data, rows, cols), keep_(std::move(keep)) {}

  std::uint32_t layer() const noexcept { return layer_; }
  const Map& data() const noexcept { return data_; }
  Index rows() const noexcept { return data_.rows(); }
  Index cols() const noexcept { return data_.cols(); }

  Matrix to_matrix() const { return data_.cast<double>(); }

  /// Gathers the given token rows into a double matrix.
  Matrix gather(const std::vector<Index>& tokens) const {
    Matrix out(static_cast<Index>(tokens.size()), cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= rows())
        throw IndexError("token row " + std::to_string(tokens[i]) + " outside store");
      out.row(static_cast<Index>(i)) = data_.row(tokens[i]).cast<double>();
    }
    return out;
  }

 private:
  std::uint32_t layer_;
  Map data_;
  std::shared_ptr<const void> keep_;
};

/// Activations for every layer of a token sequence. Immutable once opened from
/// disk; in-memory stores may be filled through set_layer before writing.
class ActivationStore {
 public:
  ActivationStore() = default;

  /// Zero-filled in-memory store.
  ActivationStore(std::uint32_t num_layers, std::uint64_t n_tokens, std::uint32_t dim,
                  std::string corpus_tag = {})
      : corpus_tag_(std::move(corpus_tag)) {
    header_.num_layers = num_layers;
    header_.n_tokens = n_tokens;
    header_.dim = dim;
    header_.corpus_hash = fnv1a(corpus_tag_);
    auto buf = std::make_shared<std::vector<float>>(header_.slab_values() * num_layers, 0.0f);
    data_ = buf->data();
    owned_ = std::move(buf);
  }

  /// Builds an in-memory store from per-layer double matrices (cast to float32).
  static ActivationStore from_layers(const std::vector<Matrix>& layers, std::string corpus_tag = {}) {
    if (layers.empty()) return ActivationStore(0, 0, 0, std::move(corpus_tag));
    ActivationStore s(static_cast<std::uint32_t>(layers.size()),
                      static_cast<std::uint64_t>(layers[0].rows()),
                      static_cast<std::uint32_t>(layers[0].cols()), std::move(corpus_tag));
    for (std::size_t l = 0; l < layers.size(); ++l) s.set_layer(static_cast<std::uint32_t>(l), layers[l]);
    return s;
  }

  /// Number of stored layer slabs, including layer 0.
  std::uint32_t num_layers() const noexcept { return header_.num_layers; }
  std::uint64_t n_tokens() const noexcept { return header_.n_tokens; }
  std::uint32_t dim() const noexcept { return header_.dim; }
  std::uint64_t corpus_hash() const noexcept { return header_.corpus_hash; }
  const std::string& corpus_tag() const noexcept { return corpus_tag_; }
  const HdacHeader& header() const noexcept { return header_; }
  bool writable() const noexcept { return static_cast<bool>(owned_); }

  LayerSlice slice_layer(std::uint32_t layer) const {
    if (layer >= num_layers())
      throw IndexError("layer " + std::to_string(layer) + " outside [0, " +
                       std::to_string(num_layers()) + ")");
    return LayerSlice(layer, data_ + layer * header_.slab_values(),
                      static_cast<Index>(n_tokens()), static_cast<Index>(dim()), keep_alive());
  }

  void set_layer(std::uint32_t layer, const Eigen::Ref<const Matrix>& values) {
    if (!owned_) throw ValidationError("store opened from disk is read-only");
    if (layer >= num_layers()) throw IndexError("layer " + std::to_string(layer) + " outside store");
    if (values.rows() != static_cast<Index>(n_tokens()) || values.cols() != static_cast<Index>(dim()))
      throw ValidationError("layer matrix shape does not match store");
    Eigen::Map<MatrixF> dst(const_cast<float*>(data_) + layer * header_.slab_values(),
                            static_cast<Index>(n_tokens()), static_cast<Index>(dim()));
    dst = values.cast<float>();
  }

  /// Throws ValidationError naming the first non-finite (layer, token, dim).
  void validate() const {
    const std::uint64_t per = header_.slab_values();
    for (std::uint32_t l = 0; l < num_layers(); ++l) {
      const float* p = data_ + l * per;
      for (std::uint64_t i = 0; i < per; ++i) {
        if (!std::isfinite(p[i])) {
          std::ostringstream os;
          os << "non-finite activation at (layer " << l << ", token " << i / dim() << ", dim "
             << i % dim() << ")";
          throw ValidationError(os.str());
        }
      }
    }
  }

  /// Raw slab bytes for layer l (used for hashing and writing).
  const float* raw_layer(std::uint32_t l) const { return data_ + l * header_.slab_values(); }

  static ActivationStore from_mapping(HdacHeader h, std::shared_ptr<const detail::MappedFile> map) {
    ActivationStore s;
    s.header_ = h;
    s.mapped_ = std::move(map);
    if (s.mapped_ && s.mapped_->size() > kHdacHeaderSize)
      s.data_ = reinterpret_cast<const float*>(s.mapped_->data() + kHdacHeaderSize);
    return s;
  }

 private:
  std::shared_ptr<const void> keep_alive() const {
    if (owned_) return owned_;
    return mapped_;
  }

  HdacHeader header_;
  std::string corpus_tag_;
  const float* data_ = nullptr;
  std::shared_ptr<std::vector<float>> owned_;
  std::shared_ptr<const detail::MappedFile> mapped_;
};

/// Opens an `.hdac` file lazily (memory-mapped; slabs are paged on access).
inline ActivationStore open_store(const std::filesystem::path& path) {
  auto map = std::make_shared<const detail::MappedFile>(path);
  if (map->size() < kHdacHeaderSize) {
    if (map->size() >= kHdacMagic.size() &&
        std::memcmp(map->data(), kHdacMagic.data(), kHdacMagic.size()) == 0)
      throw CorruptError(path.string() + ": truncated header");
    throw FormatError(path.string() + ": bad magic: not an .hdac file");
  }
  HdacHeader h = detail::decode_header(map->data());
  if (map->size() != h.file_bytes()) {
    std::ostringstream os;
    os << path.string() << ": expected " << h.file_bytes() << " bytes, found " << map->size();
    throw CorruptError(os.str());
  }
  return ActivationStore::from_mapping(h, std::move(map));
}

/// Writes the store; validation happens before any byte is written. Output goes
/// to a temporary sibling which is renamed into place.
inline void write_store(const ActivationStore& store, const std::filesystem::path& path) {
  store.validate();
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    auto hdr = detail::encode_header(store.header());
    out.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
    for (std::uint32_t l = 0; l < store.num_layers(); ++l)
      out.write(reinterpret_cast<const char*>(store.raw_layer(l)),
                static_cast<std::streamsize>(store.header().slab_bytes()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("short write to " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Token alignment sidecar
// ---------------------------------------------------------------------------

struct TokenAlignment {
  std::vector<std::int64_t> word_index;
  std::vector<double> onset_s;
  std::vector<bool> is_final;

  std::size_t size() const noexcept { return word_index.size(); }

  /// Token row of each word's final token, in word order.
  std::vector<Index> final_tokens() const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (is_final[i]) out.push_back(static_cast<Index>(i));
    return out;
  }

  void validate() const {
    if (onset_s.size() != size() || is_final.size() != size())
      throw ValidationError("alignment columns differ in length");
    std::int64_t open_word = -1;
    bool open = false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!std::isfinite(onset_s[i])) throw ValidationError("non-finite onset at token " + std::to_string(i));
      if (i > 0 && onset_s[i] < onset_s[i - 1])
        throw ValidationError("onsets decrease at token " + std::to_string(i));
      if (open && word_index[i] != open_word)
        throw ValidationError("word " + std::to_string(open_word) + " has no final token");
      if (!open && i > 0 && word_index[i] == word_index[i - 1])
        throw ValidationError("word " + std::to_string(word_index[i]) + " has tokens after its final token");
      open = !is_final[i];
      open_word = word_index[i];
    }
    if (open) throw ValidationError("word " + std::to_string(open_word) + " has no final token");
  }
};

inline void write_alignment(const TokenAlignment& a, const std::filesystem::path& path) {
  a.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "token_index\tword_index\tonset_s\tis_final\n";
  for (std::size_t i = 0; i < a.size(); ++i)
    out << i << '\t' << a.word_index[i] << '\t' << fmt_num(a.onset_s[i]) << '\t'
        << (a.is_final[i] ? 1 : 0) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

inline TokenAlignment read_alignment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("token_index\t", 0) != 0)
    throw FormatError(path.string() + ": missing alignment header");
  TokenAlignment a;
  std::size_t expect = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t tok;
    std::int64_t word;
    double onset;
    int fin;
    if (!(ls >> tok >> word >> onset >> fin) || tok != expect)
      throw FormatError(path.string() + ": malformed row for token " + std::to_string(expect));
    a.word_index.push_back(word);
    a.onset_s.push_back(onset);
    a.is_final.push_back(fin != 0);
    ++expect;
  }
  a.validate();
  return a;
}

}  // namespace resdis
