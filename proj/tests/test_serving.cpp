#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "qih/http.hpp"
#include "qih/serving.hpp"
#include "qih/trainer.hpp"
#include "support.hpp"

using namespace qih;
using qih::test::toy_config;

namespace {

const std::vector<std::string> kWords{"run", "##ning", "shoe", "##s", "help", "with", "cheap", "tv", "lamp", "red"};

Vocab serving_vocab() {
    std::vector<std::string> t{"[PAD]", "[UNK]", "[CLS]"};
    t.insert(t.end(), kWords.begin(), kWords.end());
    return Vocab::from_tokens(t);
}

IntentArtifact head_only(const Encoder<float>& enc, std::uint64_t seed, std::size_t layer = 0) {
    const std::size_t L = enc.config.num_layers;
    return make_artifact("h" + std::to_string(seed), enc, L, layer ? layer : L,
                         IntentHead<float>::random(enc.config.hidden, 2, "head", seed), encoder_fingerprint(enc));
}

// Artifact with tuned copies of layers N+1..L (perturbed so they differ from the base).
IntentArtifact partial(const Encoder<float>& base, std::size_t n, std::uint64_t seed) {
    auto tuned = base.clone();
    Rng rng(seed);
    for (std::size_t l = n + 1; l <= tuned.config.num_layers; ++l)
        for (const auto& p : tuned.layer_parameters(l))
            for (auto& v : p->data) v += static_cast<float>(0.05 * rng.normal());
    if (n == 0)
        for (const auto& p : tuned.embedding_parameters())
            for (auto& v : p->data) v += static_cast<float>(0.05 * rng.normal());
    return make_artifact("p" + std::to_string(seed), tuned, n, tuned.config.num_layers,
                         IntentHead<float>::random(base.config.hidden, 2, "head", seed), encoder_fingerprint(base));
}

struct Stack {
    std::shared_ptr<EmbeddingService> embeddings;
    std::shared_ptr<IntentRegistry> registry;
    std::shared_ptr<IntentService> service;

    explicit Stack(std::size_t layers = 3) {
        auto c = toy_config(layers, 16);
        c.max_positions = 13;
        embeddings = std::make_shared<EmbeddingService>(init_weights<float>(c, 21), serving_vocab());
        registry = std::make_shared<IntentRegistry>(embeddings);
        service = std::make_shared<IntentService>(embeddings, registry);
    }
    const Encoder<float>& enc() const { return embeddings->encoder(); }
};

std::vector<std::string> names(std::initializer_list<const char*> l) { return {l.begin(), l.end()}; }

} // namespace

TEST(FinalLayers, LastThree) {
    EXPECT_EQ(final_layers(12), (std::vector<std::size_t>{10, 11, 12}));
    EXPECT_EQ(final_layers(2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(final_layers(1), (std::vector<std::size_t>{1}));
}

TEST(EmbeddingService, TwelveLayerBundleKeys) {
    auto c = toy_config(12, 16);
    c.max_positions = 13;
    EmbeddingService s(init_weights<float>(c, 1), serving_vocab());
    const auto b = s.get_embeddings("red shoes");
    ASSERT_EQ(b.layers.size(), 3u);
    EXPECT_TRUE(b.layers.count(10) && b.layers.count(11) && b.layers.count(12));
    for (const auto& [l, v] : b.layers) EXPECT_EQ(v.size(), c.hidden);
}

TEST(EmbeddingService, BundleEqualsDirectEncodeAndCountsForwards) {
    Stack st;
    const auto before = st.embeddings->forward_count();
    const auto a = st.embeddings->get_embeddings("running shoes");
    const auto b = st.embeddings->get_embeddings("running shoes");
    EXPECT_EQ(st.embeddings->forward_count(), before + 2);
    EXPECT_EQ(a.layers, b.layers);
    const auto direct = encode(st.enc(), tokenize("running shoes", st.embeddings->vocab()), {1, 2, 3});
    EXPECT_EQ(a.layers, direct);
    EXPECT_THROW(st.embeddings->get_embeddings("x", {3}), ServiceError);
    EXPECT_THROW(st.embeddings->get_embeddings("x", {0}), ServiceError);
}

TEST(EmbeddingService, RejectsOversizedVocab) {
    EXPECT_THROW(EmbeddingService(init_weights<float>(toy_config(2, 5), 1), serving_vocab()), ServiceError);
}

TEST(IntentService, OneForwardPerRequest) {
    Stack st;
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    st.registry->register_intent({"adult", "", "", {}}, partial(st.enc(), 1, 2));
    st.registry->register_intent({"low_asp", "", "", {}}, partial(st.enc(), 0, 3));
    const auto before = st.embeddings->forward_count();
    const auto r = st.service->get_query_intents("help with tv", names({"help", "adult", "low_asp"}));
    EXPECT_EQ(st.embeddings->forward_count(), before + 1);
    ASSERT_EQ(r.size(), 3u);
    for (const auto& [n, res] : r) {
        EXPECT_FALSE(res.error) << n;
        EXPECT_GE(res.score, 0.0);
        EXPECT_LE(res.score, 1.0);
        EXPECT_EQ(res.positive, res.score >= res.threshold);
    }
}

TEST(IntentService, ServingMatchesOfflineScoresBitExactly) {
    Stack st;
    const std::vector<IntentArtifact> arts{head_only(st.enc(), 1), head_only(st.enc(), 4, 2), partial(st.enc(), 1, 2),
                                           partial(st.enc(), 2, 5), partial(st.enc(), 0, 3)};
    std::vector<std::string> ns;
    for (std::size_t i = 0; i < arts.size(); ++i) {
        ns.push_back("i" + std::to_string(i));
        st.registry->register_intent({ns.back(), "", "", {}}, arts[i]);
    }
    const std::vector<std::string> queries{"running shoes", "help with tv", "", "cheap red lamp", "zzz"};
    std::vector<TokenSequence> toks;
    for (const auto& q : queries) toks.push_back(tokenize(q, st.embeddings->vocab()));
    for (std::size_t i = 0; i < arts.size(); ++i) {
        const auto offline = score_intent(arts[i], bind_encoder(arts[i], st.enc()), toks);
        for (std::size_t q = 0; q < queries.size(); ++q) {
            const auto r = st.service->get_query_intents(queries[q], ns);
            EXPECT_EQ(r.at(ns[i]).score, static_cast<double>(offline[q])) << ns[i] << " " << queries[q];
        }
    }
}

TEST(IntentService, IndependenceOrderAndUnknown) {
    Stack st;
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    st.registry->register_intent({"adult", "", "", {}}, partial(st.enc(), 2, 2));
    const auto both = st.service->get_query_intents("cheap tv", names({"help", "adult"}));
    const auto flipped = st.service->get_query_intents("cheap tv", names({"adult", "help"}));
    const auto h = st.service->get_query_intents("cheap tv", names({"help"}));
    const auto a = st.service->get_query_intents("cheap tv", names({"adult"}));
    EXPECT_EQ(both.at("help").score, h.at("help").score);
    EXPECT_EQ(both.at("adult").score, a.at("adult").score);
    EXPECT_EQ(both.at("help").score, flipped.at("help").score);
    EXPECT_EQ(both.at("adult").score, flipped.at("adult").score);
    const auto mixed = st.service->get_query_intents("cheap tv", names({"help", "unknown_x"}));
    EXPECT_FALSE(mixed.at("help").error);
    EXPECT_EQ(mixed.at("help").score, h.at("help").score);
    ASSERT_TRUE(mixed.at("unknown_x").error);
}

TEST(IntentRegistry, RegistrationIsolation) {
    Stack st;
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    const auto before = st.service->get_query_intents("red lamp", names({"help"}));
    st.registry->register_intent({"adult", "", "", {}}, partial(st.enc(), 1, 2));
    EXPECT_EQ(st.service->get_query_intents("red lamp", names({"help"})).at("help").score, before.at("help").score);
    st.registry->remove_intent("adult");
    EXPECT_EQ(st.service->get_query_intents("red lamp", names({"help"})).at("help").score, before.at("help").score);
    EXPECT_THROW(st.registry->remove_intent("adult"), ServiceError);
}

TEST(IntentRegistry, Rejections) {
    Stack st;
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    EXPECT_THROW(st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 2)), ServiceError);
    auto other = init_weights<float>(st.enc().config, 99);
    EXPECT_THROW(st.registry->register_intent({"x", "", "", {}}, head_only(other, 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"x", "own-layers", "", {}}, head_only(st.enc(), 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"x", "3", "", {}}, partial(st.enc(), 1, 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"x", "2", "", {}}, head_only(st.enc(), 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"x", "eleven", "", {}}, head_only(st.enc(), 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"x", "", "", 1.5}, head_only(st.enc(), 1)), ServiceError);
    EXPECT_THROW(st.registry->register_intent({"", "", "", {}}, head_only(st.enc(), 1)), ServiceError);
    auto wide = toy_config(3, 16);
    wide.hidden = 16;
    EXPECT_THROW(st.registry->register_intent({"x", "", "", {}}, head_only(init_weights<float>(wide, 1), 1)),
                 ServiceError);
    EXPECT_EQ(st.registry->snapshot()->size(), 1u);
}

TEST(IntentRegistry, ExplicitLayerSpecAndThreshold) {
    Stack st;
    st.registry->register_intent({"a", "2", "", 0.0}, head_only(st.enc(), 1, 2));
    st.registry->register_intent({"b", "own-layers", "", 1.0}, partial(st.enc(), 1, 2));
    const auto r = st.service->get_query_intents("tv", names({"a", "b"}));
    EXPECT_TRUE(r.at("a").positive);
    EXPECT_EQ(r.at("a").threshold, 0.0);
    EXPECT_EQ(r.at("b").positive, r.at("b").score >= 1.0);
}

TEST(IntentRegistry, HundredHeadsCostOnlyHeadBytes) {
    auto c = toy_config(3, 16);
    c.hidden = 768;
    c.heads = 12;
    c.feed_forward = 32;
    c.max_positions = 13;
    auto emb = std::make_shared<EmbeddingService>(init_weights<float>(c, 1), serving_vocab());
    IntentRegistry reg(emb);
    const auto encoder_bytes = total_size(emb->encoder().parameters()) * sizeof(float);
    for (int i = 0; i < 100; ++i) reg.register_intent({"i" + std::to_string(i), "", "", {}}, head_only(emb->encoder(), i));
    EXPECT_EQ(reg.resident_bytes(), 100u * 1538u * 4u);
    EXPECT_EQ(total_size(emb->encoder().parameters()) * sizeof(float), encoder_bytes);
}

TEST(LatencyProbe, CountsAndConcurrencyInvariance) {
    Stack st;
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    st.registry->register_intent({"adult", "", "", {}}, partial(st.enc(), 1, 2));
    std::vector<std::string> queries;
    Rng rng(3);
    for (int i = 0; i < 200; ++i) queries.push_back(rng.pick(kWords) + " " + rng.pick(kWords));
    const auto ns = names({"help", "adult"});
    const auto one = latency_probe(*st.service, queries, ns, 1);
    const auto eight = latency_probe(*st.service, queries, ns, 8);
    EXPECT_EQ(one.forward_passes, 200u);
    EXPECT_EQ(eight.forward_passes, 200u);
    for (std::size_t i = 0; i < queries.size(); ++i)
        for (const auto& n : ns) EXPECT_EQ(one.results[i].at(n).score, eight.results[i].at(n).score);
    EXPECT_GT(eight.p99_ms, 0.0);
    EXPECT_TRUE(std::isfinite(eight.p99_ms));
    EXPECT_LE(eight.p50_ms, eight.p99_ms);
    EXPECT_THROW(latency_probe(*st.service, queries, ns, 0), ServiceError);
}

TEST(Percentile, NearestRank) {
    EXPECT_EQ(percentile({5, 1, 3, 2, 4}, 0.5), 3.0);
    EXPECT_EQ(percentile({5, 1, 3, 2, 4}, 0.99), 5.0);
    EXPECT_EQ(percentile({}, 0.5), 0.0);
}

TEST(Http, Endpoints) {
    Stack st;
    const auto dir = std::filesystem::temp_directory_path();
    st.registry->register_intent({"help", "", "", {}}, head_only(st.enc(), 1));
    const auto head_path = (dir / "qih_http_adult.qih").string();
    save_artifact(head_path, partial(st.enc(), 1, 2));

    httplib::Server server;
    install_routes(server, st.service);
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/healthz");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 200);

    auto emb = cli.Post("/embeddings", R"({"query":"red lamp"})", "application/json");
    ASSERT_TRUE(emb);
    const auto ej = json::parse(emb->body);
    EXPECT_EQ(ej.at("layers").size(), 3u);
    EXPECT_EQ(ej.at("layers").at("3").get<std::vector<float>>(), st.embeddings->get_embeddings("red lamp").layers.at(3));

    json reg{{"name", "adult"}, {"layer_spec", "own-layers"}, {"head", head_path}, {"threshold", 0.5}};
    auto admin = cli.Post("/admin/intents", reg.dump(), "application/json");
    ASSERT_TRUE(admin);
    EXPECT_EQ(admin->status, 200);
    auto dup = cli.Post("/admin/intents", reg.dump(), "application/json");
    ASSERT_TRUE(dup);
    EXPECT_EQ(dup->status, 400);

    auto res = cli.Post("/intents", R"({"query":"help with tv","intents":["help","adult","nope"]})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto rj = json::parse(res->body);
    const auto direct = st.service->get_query_intents("help with tv", names({"help", "adult"}));
    EXPECT_EQ(rj.at("help").at("score").get<double>(), direct.at("help").score);
    EXPECT_EQ(rj.at("adult").at("score").get<double>(), direct.at("adult").score);
    EXPECT_EQ(rj.at("help").at("label"), direct.at("help").positive ? "positive" : "negative");
    EXPECT_TRUE(rj.at("nope").contains("error"));

    auto bad = cli.Post("/intents", "not json", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    server.stop();
    t.join();
}

TEST(Http, RegistryFile) {
    const auto dir = std::filesystem::temp_directory_path() / "qih_registry_test";
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "registry.json") << R"([{"name":"help","layer_spec":12,"head":"help.qih"},
                                              {"name":"adult","layer_spec":"own-layers","head":"/abs/adult.qih","threshold":0.85}])";
    const auto specs = load_registry_file((dir / "registry.json").string());
    ASSERT_EQ(specs.size(), 2u);
    EXPECT_EQ(specs[0].layer_spec, "12");
    EXPECT_EQ(specs[0].head_path, (dir / "help.qih").string());
    EXPECT_FALSE(specs[0].threshold);
    EXPECT_EQ(specs[1].head_path, "/abs/adult.qih");
    EXPECT_EQ(*specs[1].threshold, 0.85);
    std::ofstream(dir / "bad.json") << R"({"name":"x"})";
    EXPECT_THROW(load_registry_file((dir / "bad.json").string()), ServiceError);
}
