#pragma once

// Named tensor container used for parameter checkpoints and simulator state.
// The on-disk layout is described in docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfr/nn.hpp"

namespace pfr {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TensorArchive {
 public:
  struct Tensor {
    std::vector<std::uint64_t> shape;
    std::vector<double> data;  // row-major
  };

  void put(const std::string& name, const Matrix& m);
  void put(const std::string& name, const Vector& v);
  void put_text(const std::string& name, std::string text);
  void put_layers(const std::string& prefix, std::span<const DenseLayer> layers);

  bool contains(const std::string& name) const;
  Matrix matrix(const std::string& name) const;
  Vector vector(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  LayerStack layers(const std::string& prefix) const;

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void write(std::ostream& out) const;
  static TensorArchive read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> texts_;
};

}  // namespace pfr
