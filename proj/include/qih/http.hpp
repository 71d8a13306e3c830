#pragma once

// HTTP front end for the intent service.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "qih/serving.hpp"

namespace qih {

using nlohmann::json;

inline IntentSpecification spec_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    IntentSpecification s;
    s.name = j.at("name").get<std::string>();
    if (j.contains("layer_spec")) {
        const auto& ls = j.at("layer_spec");
        s.layer_spec = ls.is_number_unsigned() ? std::to_string(ls.get<std::size_t>()) : ls.get<std::string>();
    }
    std::filesystem::path head = j.at("head").get<std::string>();
    s.head_path = (head.is_relative() && !base_dir.empty() ? base_dir / head : head).string();
    if (j.contains("threshold")) s.threshold = j.at("threshold").get<double>();
    return s;
}

// Registry file: JSON array of {"name", "layer_spec", "head", "threshold"}; head paths relative to the file.
inline std::vector<IntentSpecification> load_registry_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ServiceError("cannot open registry file '" + path + "'");
    const json j = json::parse(f);
    if (!j.is_array()) throw ServiceError("registry file must hold a JSON array");
    std::vector<IntentSpecification> out;
    const auto dir = std::filesystem::path(path).parent_path();
    for (const auto& e : j) out.push_back(spec_from_json(e, dir));
    return out;
}

inline json result_json(const IntentResult& r) {
    if (r.error) return {{"error", *r.error}};
    return {{"label", r.positive ? "positive" : "negative"}, {"score", r.score}, {"threshold", r.threshold}};
}

inline json bundle_json(const EmbeddingBundle& b) {
    json layers = json::object();
    for (const auto& [l, v] : b.layers) layers[std::to_string(l)] = v;
    return {{"layers", layers}};
}

inline void install_routes(httplib::Server& server, std::shared_ptr<IntentService> service) {
    auto fail = [](httplib::Response& res, int status, const std::string& msg) {
        res.status = status;
        res.set_content(json{{"error", msg}}.dump(), "application/json");
    };
    auto handle = [fail](auto body) {
        return [fail, body](const httplib::Request& req, httplib::Response& res) {
            try {
                body(req, res);
            } catch (const json::exception& e) {
                fail(res, 400, e.what());
            } catch (const ServiceError& e) {
                fail(res, 400, e.what());
            } catch (const std::exception& e) {
                fail(res, 500, e.what());
            }
        };
    };
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });
    server.Post("/embeddings", handle([service](const httplib::Request& req, httplib::Response& res) {
        const auto q = json::parse(req.body).at("query").get<std::string>();
        res.set_content(bundle_json(service->embeddings().get_embeddings(q)).dump(), "application/json");
    }));
    server.Post("/intents", handle([service](const httplib::Request& req, httplib::Response& res) {
        const auto j = json::parse(req.body);
        const auto q = j.at("query").get<std::string>();
        const auto names = j.at("intents").get<std::vector<std::string>>();
        json out = json::object();
        for (const auto& [name, r] : service->get_query_intents(q, names)) out[name] = result_json(r);
        res.set_content(out.dump(), "application/json");
    }));
    server.Post("/admin/intents", handle([service](const httplib::Request& req, httplib::Response& res) {
        const auto spec = spec_from_json(json::parse(req.body));
        service->registry().register_intent(spec);
        res.set_content(json{{"registered", spec.name}}.dump(), "application/json");
    }));
}

} // namespace qih
