// SPDX-License-Identifier: Apache-2.0

#include "clora/checkpoint.hpp"

namespace clora::lora {

Json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

Matrix matrix_from_json(const Json& j) {
    return {j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>()};
}

Json stack_to_json(const AdapterStack& s) {
    Json pairs = Json::array();
    for (const auto& p : s.past()) {
        pairs.push_back({{"task_id", p.task_id}, {"a", matrix_to_json(p.a)}, {"b", matrix_to_json(p.b)}});
    }
    const std::size_t rank = s.past().empty() ? 0 : s.past().back().rank();
    return {{"site", s.site_id()}, {"d1", s.d1()}, {"d2", s.d2()}, {"rank", rank}, {"pairs", pairs}};
}

std::vector<LoraPair> pairs_from_json(const Json& j) {
    std::vector<LoraPair> out;
    for (const auto& p : j.at("pairs")) {
        LoraPair pair;
        pair.task_id = p.at("task_id").get<int>();
        pair.a = matrix_from_json(p.at("a"));
        pair.b = matrix_from_json(p.at("b"));
        pair.frozen = true;
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace clora::lora
