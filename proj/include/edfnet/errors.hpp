#pragma once

#include <stdexcept>
#include <string>

namespace edfnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

class PyramidCollapseError : public Error {
 public:
  explicit PyramidCollapseError(int layer)
      : Error("pyramid collapse: layer " + std::to_string(layer) +
              " subsampled to zero points"),
        layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class NoOverlapError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace edfnet
