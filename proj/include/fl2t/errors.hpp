// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fl2t {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-conforming matrix or parameter shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// The operation is undefined for the given (degenerate) input.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Non-finite function value encountered at a probe point.
class EvaluationError : public Error {
public:
    EvaluationError(const std::string& what, std::size_t coordinate)
        : Error(what), coordinate_(coordinate) {}
    std::size_t coordinate() const noexcept { return coordinate_; }

private:
    std::size_t coordinate_;
};

/// Token id not present in the vocabulary.
class VocabularyError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment configuration; `what()` names the offending field path.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Loss became non-finite during optimization.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace fl2t
