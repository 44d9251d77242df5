// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fxq {

struct Error : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition.
struct ContractViolation : std::logic_error
{
    using std::logic_error::logic_error;
};

struct IoError : Error
{
    using Error::Error;
};

struct ManifestError : Error
{
    using Error::Error;
};

struct DanglingReferenceError : Error
{
    using Error::Error;
};

struct CycleError : Error
{
    using Error::Error;
};

struct UnsupportedLayerError : Error
{
    using Error::Error;
};

struct DatasetError : Error
{
    using Error::Error;
};

struct ShapeError : Error
{
    ShapeError(std::string layer_id, const std::string& what)
        : Error("layer '" + layer_id + "': " + what), layer(std::move(layer_id))
    {
    }
    std::string layer;
};

struct PlanError : Error
{
    using Error::Error;
};

} // namespace fxq
