// SPDX-License-Identifier: Apache-2.0
//
// JSON forms of matrices and adapter stacks. Doubles are written in shortest
// round-trip decimal, so reading a checkpoint back is bit-exact.

#pragma once

#include <vector>

#include "clora/adapter.hpp"
#include "clora/config.hpp"

namespace clora::lora {

Json matrix_to_json(const Matrix& m);  // {"rows","cols","data"}
Matrix matrix_from_json(const Json& j);

/// {"site","d1","d2","rank","pairs":[{"task_id","a","b"}]} for frozen pairs.
Json stack_to_json(const AdapterStack& s);
/// Frozen pairs listed in a stack_to_json document.
std::vector<LoraPair> pairs_from_json(const Json& j);

}  // namespace clora::lora
