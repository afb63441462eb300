#include "pfr/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace pfr {

namespace {

constexpr char kMagic[8] = {'P', 'F', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kTensorTag = 0;
constexpr std::uint8_t kTextTag = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put_raw(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_raw(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ArchiveError("truncated checkpoint");
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto size = get_raw<std::uint32_t>(in);
  std::string s(size, '\0');
  if (size > 0 && !in.read(s.data(), size)) throw ArchiveError("truncated checkpoint");
  return s;
}

}  // namespace

void TensorArchive::put(const std::string& name, const Matrix& m) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(m(r, c));
  }
  tensors_[name] = std::move(t);
}

void TensorArchive::put(const std::string& name, const Vector& v) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(v.size())};
  t.data.assign(v.data(), v.data() + v.size());
  tensors_[name] = std::move(t);
}

void TensorArchive::put_text(const std::string& name, std::string text) { texts_[name] = std::move(text); }

void TensorArchive::put_layers(const std::string& prefix, std::span<const DenseLayer> layers) {
  put_text(prefix + ".layers", std::to_string(layers.size()));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    put(prefix + "." + std::to_string(i) + ".weight", layers[i].weight);
    put(prefix + "." + std::to_string(i) + ".bias", layers[i].bias);
  }
}

bool TensorArchive::contains(const std::string& name) const {
  return tensors_.count(name) > 0 || texts_.count(name) > 0;
}

Matrix TensorArchive::matrix(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end() || it->second.shape.size() != 2) throw ArchiveError("no matrix named " + name);
  const auto rows = static_cast<Eigen::Index>(it->second.shape[0]);
  const auto cols = static_cast<Eigen::Index>(it->second.shape[1]);
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = it->second.data[k++];
  }
  return m;
}

Vector TensorArchive::vector(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end() || it->second.shape.size() != 1) throw ArchiveError("no vector named " + name);
  return Eigen::Map<const Vector>(it->second.data.data(), static_cast<Eigen::Index>(it->second.data.size()));
}

const std::string& TensorArchive::text(const std::string& name) const {
  const auto it = texts_.find(name);
  if (it == texts_.end()) throw ArchiveError("no text entry named " + name);
  return it->second;
}

LayerStack TensorArchive::layers(const std::string& prefix) const {
  const auto count = std::stoull(text(prefix + ".layers"));
  LayerStack out;
  for (std::size_t i = 0; i < count; ++i) {
    DenseLayer layer;
    layer.weight = matrix(prefix + "." + std::to_string(i) + ".weight");
    layer.bias = vector(prefix + "." + std::to_string(i) + ".bias");
    out.push_back(std::move(layer));
  }
  return out;
}

void TensorArchive::write(std::ostream& out) const {
  out.write(kMagic, sizeof(kMagic));
  put_raw<std::uint32_t>(out, kVersion);
  put_raw<std::uint64_t>(out, tensors_.size() + texts_.size());
  for (const auto& [name, t] : tensors_) {
    put_raw<std::uint8_t>(out, kTensorTag);
    put_string(out, name);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_raw<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  for (const auto& [name, s] : texts_) {
    put_raw<std::uint8_t>(out, kTextTag);
    put_string(out, name);
    put_string(out, s);
  }
  if (!out) throw ArchiveError("failed writing checkpoint");
}

TensorArchive TensorArchive::read(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ArchiveError("not a checkpoint file");
  }
  if (get_raw<std::uint32_t>(in) != kVersion) throw ArchiveError("unsupported checkpoint version");
  TensorArchive archive;
  const auto count = get_raw<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto tag = get_raw<std::uint8_t>(in);
    auto name = get_string(in);
    if (tag == kTensorTag) {
      Tensor t;
      const auto rank = get_raw<std::uint32_t>(in);
      std::uint64_t elements = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        t.shape.push_back(get_raw<std::uint64_t>(in));
        elements *= t.shape.back();
      }
      t.data.resize(elements);
      if (elements > 0 &&
          !in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(elements * sizeof(double)))) {
        throw ArchiveError("truncated checkpoint");
      }
      archive.tensors_[std::move(name)] = std::move(t);
    } else if (tag == kTextTag) {
      archive.texts_[std::move(name)] = get_string(in);
    } else {
      throw ArchiveError("unknown entry tag in checkpoint");
    }
  }
  return archive;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  // Written beside the target and renamed into place.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot write " + tmp.string());
    write(out);
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open " + path.string());
  return read(in);
}

}  // namespace pfr
