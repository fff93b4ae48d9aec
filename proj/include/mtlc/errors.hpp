// Copyright 2026 The mtlc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MTLC_ERRORS_HPP_
#define MTLC_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace mtlc {

// Base class for every domain error raised by the library. The CLI maps these
// to exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SyntaxError : public Error {
 public:
  SyntaxError(int line, int column, std::string expected)
      : Error("syntax error at " + std::to_string(line) + ":" +
              std::to_string(column) + ": expected " + expected),
        line_(line),
        column_(column),
        expected_(std::move(expected)) {}

  int line() const { return line_; }
  int column() const { return column_; }
  const std::string& expected() const { return expected_; }

 private:
  int line_;
  int column_;
  std::string expected_;
};

class UnsupportedLayer : public Error {
 public:
  explicit UnsupportedLayer(std::string kind)
      : Error("unsupported layer: " + kind), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

class DanglingReference : public Error {
 public:
  explicit DanglingReference(std::string name)
      : Error("dangling reference: '" + name + "' is not produced by any earlier layer"),
        name_(std::move(name)) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

// Raised when a layer is structurally invalid in a way the parser cannot
// recover from (missing required params, bad values).
class InvalidLayer : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  ShapeMismatch(std::string node, const std::string& detail)
      : Error("shape mismatch at " + node + ": " + detail), node_(std::move(node)) {}
  const std::string& node() const { return node_; }

 private:
  std::string node_;
};

class ShapesMissing : public Error {
 public:
  using Error::Error;
};

class CycleDetected : public Error {
 public:
  using Error::Error;
};

class EmptyTaskList : public Error {
 public:
  EmptyTaskList() : Error("task list is empty") {}
};

class IncompatibleShapes : public Error {
 public:
  using Error::Error;
};

class PolicyShapeMismatch : public Error {
 public:
  using Error::Error;
};

class LabelOutOfRange : public Error {
 public:
  using Error::Error;
};

class ZeroVector : public Error {
 public:
  using Error::Error;
};

class ZeroReference : public Error {
 public:
  explicit ZeroReference(std::string metric)
      : Error("single-task reference for metric '" + metric + "' is zero"),
        metric_(std::move(metric)) {}
  const std::string& metric() const { return metric_; }

 private:
  std::string metric_;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class Divergence : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

}  // namespace mtlc

#endif  // MTLC_ERRORS_HPP_
