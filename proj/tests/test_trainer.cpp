#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "qih/datagen.hpp"
#include "qih/trainer.hpp"
#include "support.hpp"

using namespace qih;
using qih::test::toy_config;
using qih::test::toy_sequences;

namespace {

TrainingHistory history_of(std::vector<double> metrics) {
    TrainingHistory h;
    for (std::size_t i = 0; i < metrics.size(); ++i) h.epochs.push_back({i + 1, 0.0, metrics[i], ""});
    return h;
}

Hyperparameters quick(double lr, std::size_t steps, std::size_t epochs, std::size_t batch = 16) {
    Hyperparameters h;
    h.learning_rate = lr;
    h.batch_size = batch;
    h.steps_per_epoch = steps;
    h.epochs = epochs;
    return h;
}

// Small world and encoder shared by the domain tests.
struct DomainFixture {
    SyntheticWorld world{SyntheticSpec{}};
    Vocab vocab = world.vocab();
    CategoryDataset train, val;
    EncoderConfig config;

    DomainFixture() {
        const auto log = generate_synthetic_log(world, 6000);
        const auto agg = aggregate_query_categories(log.records, 0);
        const auto parts = split(agg.examples, {0.8, 0.1, 0.1}, 1);
        train = make_category_dataset(parts.train, vocab, world.taxonomy());
        val = make_category_dataset(parts.validation, vocab, world.taxonomy());
        config.num_layers = 2;
        config.hidden = 16;
        config.heads = 2;
        config.feed_forward = 32;
        config.vocab_size = vocab.size();
        config.max_positions = 16;
    }
};

const DomainFixture& domain() {
    static const DomainFixture f;
    return f;
}

// Binary intent data over toy sequences: label is whether token 3 occurs.
IntentDataset keyword_dataset(std::size_t n, std::uint64_t seed) {
    IntentDataset d;
    d.tokens = toy_sequences(n, 6, 20, seed);
    for (std::size_t i = 0; i < n; ++i) {
        auto& t = d.tokens[i];
        if (i % 2 == 0) t.ids[1] = 3;
        else
            for (std::size_t j = 1; j < t.length(); ++j)
                if (t.ids[j] == 3) t.ids[j] = 4;
        d.labels.push_back(i % 2 == 0);
    }
    return d;
}

} // namespace

TEST(SelectBestEpoch, Examples) {
    EXPECT_EQ(select_best_epoch(history_of({0.7, 0.9, 0.8})), 2u);
    EXPECT_EQ(select_best_epoch(history_of({0.5, 0.5, 0.5})), 1u);
    EXPECT_EQ(select_best_epoch(history_of({0.3})), 1u);
    EXPECT_EQ(select_best_epoch(history_of({0.1, 0.4, 0.4})), 2u);
    EXPECT_THROW(select_best_epoch(TrainingHistory{}), std::invalid_argument);
}

TEST(Hyperparameters, DefaultsAndConfig) {
    const Hyperparameters d;
    EXPECT_EQ(d.learning_rate, 3e-5);
    EXPECT_EQ(d.batch_size, 500u);
    EXPECT_EQ(d.steps_per_epoch, 1000u);
    EXPECT_EQ(d.epochs, 10u);
    const auto h = Hyperparameters::from_config({{"learning_rate", "0.01"}, {"epochs", "3"}});
    EXPECT_EQ(h.learning_rate, 0.01);
    EXPECT_EQ(h.epochs, 3u);
    EXPECT_EQ(h.batch_size, 500u);
    EXPECT_THROW(Hyperparameters::from_config({{"batch_size", "0"}}), ConfigError);
    EXPECT_THROW(Hyperparameters::from_config({{"learning_rate", "-1"}}), ConfigError);
    EXPECT_THROW(Hyperparameters::from_config({{"dropout", "1"}}), ConfigError);
}

TEST(History, CsvFormat) {
    auto h = history_of({0.5, 0.75});
    h.epochs[0].loss = 0.25;
    h.epochs[1].loss = 0.125;
    std::ostringstream os;
    write_history_csv(os, h);
    EXPECT_EQ(os.str(), "epoch,loss,val_metric\n1,0.25,0.5\n2,0.125,0.75\n");
}

TEST(CategoryDataset, RejectsNonLeafLabels) {
    const auto& f = domain();
    std::vector<LabeledExample> ex{{"x", {f.world.taxonomy().node(f.world.leaves()[0]).parent}}};
    EXPECT_THROW(make_category_dataset(ex, f.vocab, f.world.taxonomy()), DataError);
}

TEST(TrainDomain, LossDecreasesOverFirstThreeEpochs) {
    const auto& f = domain();
    auto model = make_domain_model(f.config, f.world.taxonomy(), 3);
    const auto h = train_domain(model, f.train, f.val, quick(3e-3, 40, 3, 32));
    ASSERT_EQ(h.epochs.size(), 3u);
    EXPECT_LT(h.epochs[0].loss, h.initial_loss);
    EXPECT_LT(h.epochs[1].loss, h.epochs[0].loss);
    EXPECT_LT(h.epochs[2].loss, h.epochs[1].loss);
    EXPECT_GE(h.best_epoch, 1u);
}

TEST(TrainDomain, ZeroLearningRateLeavesWeights) {
    const auto& f = domain();
    auto model = make_domain_model(f.config, f.world.taxonomy(), 3);
    const auto before = tensor_checksum(model.parameters());
    train_domain(model, f.train, f.val, quick(0, 5, 1, 8));
    EXPECT_EQ(tensor_checksum(model.parameters()), before);
}

TEST(TrainDomain, SameSeedSameBytes) {
    const auto& f = domain();
    auto a = make_domain_model(f.config, f.world.taxonomy(), 3), b = make_domain_model(f.config, f.world.taxonomy(), 3);
    const auto ha = train_domain(a, f.train, f.val, quick(1e-3, 10, 2, 8));
    const auto hb = train_domain(b, f.train, f.val, quick(1e-3, 10, 2, 8));
    EXPECT_EQ(ha.epochs.back().loss, hb.epochs.back().loss);
    EXPECT_EQ(serialize(encoder_checkpoint(a.encoder)), serialize(encoder_checkpoint(b.encoder)));
    EXPECT_EQ(serialize(head_checkpoint(a.head, "category")), serialize(head_checkpoint(b.head, "category")));
}

TEST(TrainDomain, EmptyDatasetIsAnError) {
    const auto& f = domain();
    auto model = make_domain_model(f.config, f.world.taxonomy(), 3);
    EXPECT_THROW(train_domain(model, CategoryDataset{}, f.val, quick(1e-3, 1, 1)), DataError);
}

TEST(MicroF1, HandCounts) {
    std::vector<std::vector<float>> s{{0.9f, 0.2f}, {0.6f, 0.7f}}, t{{1, 1}, {0, 1}};
    // tp 2, fp 1, fn 1
    EXPECT_DOUBLE_EQ(micro_f1(s, t), 4.0 / 6.0);
}

TEST(Finetune, FullyFrozenTrainsOnlyTheHead) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(200, 1), val = keyword_dataset(60, 2);
    const auto before = tensor_checksum(base.parameters());
    const auto r = finetune_intent(base, train, val, {"kw", 2, 0, 7}, quick(1e-2, 10, 2));
    EXPECT_EQ(r.frozen_checksum_before, r.frozen_checksum_after);
    EXPECT_EQ(tensor_checksum(base.parameters()), before);
    EXPECT_TRUE(r.artifact.own_layers.empty());
    EXPECT_TRUE(r.artifact.own_embeddings.empty());
    EXPECT_EQ(total_size(r.artifact.parameters()), 2 * 8 + 2u);
    EXPECT_EQ(r.artifact.base_fingerprint, encoder_fingerprint(base));
}

TEST(Finetune, PartialFreezeMutatesOnlyTheSuffix) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    auto work = base.clone();
    const auto train = keyword_dataset(200, 1), val = keyword_dataset(60, 2);
    const auto layer2 = tensor_checksum(work.layer_parameters(2));
    const auto r = finetune_intent_in_place(work, train, val, {"kw", 1, 0, 7}, quick(1e-2, 10, 2));
    EXPECT_EQ(r.frozen_checksum_before, r.frozen_checksum_after);
    EXPECT_EQ(tensor_checksum(frozen_parameters(work, 1)), tensor_checksum(frozen_parameters(base, 1)));
    EXPECT_NE(tensor_checksum(work.layer_parameters(2)), layer2);
    ASSERT_EQ(r.artifact.own_layers.size(), 1u);
}

TEST(Finetune, UnfrozenCountShrinksWithDepth) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(100, 1), val = keyword_dataset(40, 2);
    std::vector<std::size_t> sizes;
    for (std::size_t n : {0, 1, 2})
        sizes.push_back(total_size(finetune_intent(base, train, val, {"kw", n, 0, 7}, quick(1e-3, 2, 1)).artifact.parameters()));
    EXPECT_GT(sizes[0], sizes[1]);
    EXPECT_GT(sizes[1], sizes[2]);
    EXPECT_EQ(sizes[0], count_parameters(base.config, {0}, 2 * 8 + 2).trainable);
    EXPECT_EQ(sizes[1], count_parameters(base.config, {1}, 2 * 8 + 2).trainable);
}

TEST(Finetune, InitialLossNearLn2OnBalancedData) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(256, 1), val = keyword_dataset(40, 2);
    for (std::size_t n : {0, 2}) {
        auto h = quick(1e-3, 1, 1, 256);
        const auto r = finetune_intent(base, train, val, {"kw", n, 0, 7}, h);
        EXPECT_NEAR(r.history.initial_loss, std::log(2.0), 0.1) << "N=" << n;
    }
}

// Labels are a fixed linear rule on the frozen CLS embedding, with a margin.
TEST(Finetune, LinearlySeparableClsReachesNinetyNine) {
    auto c = toy_config(2, 30);
    auto base = init_weights<float>(c, 8);
    // Larger weights than the init so CLS rows differ visibly between sequences.
    for (const auto& p : base.parameters())
        if (p->shape.size() == 2)
            for (auto& v : p->data) v *= 25;
    const auto seqs = toy_sequences(3000, 7, c.vocab_size, 9);
    const auto cls = prefix_states(base, 2, 2, seqs);
    const auto w = test::random_values<double>(c.hidden, 10);
    std::vector<double> proj;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        double z = 0;
        for (std::size_t j = 0; j < c.hidden; ++j) z += w[j] * cls[i * c.hidden + j];
        proj.push_back(z);
    }
    auto sorted = proj;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    const double margin = 0.3 * (sorted[sorted.size() * 3 / 4] - sorted[sorted.size() / 4]);
    IntentDataset train, val;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (std::abs(proj[i] - median) < margin) continue;
        auto& d = i % 5 == 0 ? val : train;
        d.tokens.push_back(seqs[i]);
        d.labels.push_back(proj[i] > median);
    }
    const auto r = finetune_intent(base, train, val, {"lin", 2, 0, 7}, quick(3e-2, 100, 10, 64));
    EXPECT_GE(r.history.epochs[r.history.best_epoch - 1].val_metric, 0.99);
}

TEST(Finetune, BestEpochWeightsAreRestored) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(200, 1), val = keyword_dataset(60, 2);
    const auto r = finetune_intent(base, train, val, {"kw", 0, 0, 7}, quick(3e-3, 20, 4));
    const auto view = bind_encoder(r.artifact, base);
    const auto acc =
        confusion_metrics(to_scored(score_intent(r.artifact, view, val.tokens), val.labels), 0.5).accuracy;
    EXPECT_EQ(acc, r.history.epochs[r.history.best_epoch - 1].val_metric);
}

TEST(Finetune, SameSeedSameArtifactBytes) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(100, 1), val = keyword_dataset(40, 2);
    const auto a = finetune_intent(base, train, val, {"kw", 1, 0, 7}, quick(1e-3, 5, 2));
    const auto b = finetune_intent(base, train, val, {"kw", 1, 0, 7}, quick(1e-3, 5, 2));
    EXPECT_EQ(serialize(artifact_checkpoint(a.artifact)), serialize(artifact_checkpoint(b.artifact)));
}

TEST(Finetune, Errors) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    auto train = keyword_dataset(20, 1);
    const auto val = keyword_dataset(10, 2);
    EXPECT_THROW(finetune_intent(base, train, val, {"kw", 3, 0, 7}, quick(1e-3, 1, 1)), ConfigError);
    EXPECT_THROW(finetune_intent(base, train, val, {"kw", 1, 1, 7}, quick(1e-3, 1, 1)), ConfigError);
    for (auto& l : train.labels) l = 1;
    EXPECT_THROW(finetune_intent(base, train, val, {"kw", 2, 0, 7}, quick(1e-3, 1, 1)), DataError);
}

TEST(Finetune, IntermediateClsLayerForFullyFrozenHead) {
    const auto base = init_weights<float>(toy_config(3, 20), 5);
    const auto train = keyword_dataset(100, 1), val = keyword_dataset(40, 2);
    const auto r = finetune_intent(base, train, val, {"kw", 3, 2, 7}, quick(1e-2, 5, 1));
    EXPECT_EQ(r.artifact.layer, 2u);
    const auto direct = prefix_states(base, 3, 2, std::span<const TokenSequence>(val.tokens).first(1));
    const auto layers = encode(base, val.tokens[0], {2});
    EXPECT_EQ(direct, layers.at(2));
}

TEST(Artifact, SaveLoadScoresBitEqual) {
    const auto base = init_weights<float>(toy_config(2, 20), 5);
    const auto train = keyword_dataset(100, 1), val = keyword_dataset(40, 2);
    const auto dir = std::filesystem::temp_directory_path();
    for (std::size_t n : {0, 1, 2}) {
        const auto r = finetune_intent(base, train, val, {"kw", n, 0, 7}, quick(1e-3, 5, 1));
        const auto path = (dir / ("qih_artifact_" + std::to_string(n) + ".qih")).string();
        save_artifact(path, r.artifact);
        const auto back = load_artifact(path);
        EXPECT_EQ(back.frozen_prefix, n);
        EXPECT_EQ(back.base_fingerprint, r.artifact.base_fingerprint);
        EXPECT_EQ(score_intent(back, bind_encoder(back, base), val.tokens),
                  score_intent(r.artifact, bind_encoder(r.artifact, base), val.tokens));
    }
}

TEST(DnnBaseline, LearnsKeywordRule) {
    std::vector<LabeledExample> train, val;
    Rng rng(4);
    const std::vector<std::string> words{"red", "shoe", "lamp", "desk", "cable"};
    for (int i = 0; i < 400; ++i) {
        std::string q = rng.pick(words) + " " + rng.pick(words);
        const int y = i % 2;
        if (y) q = "cheap " + q;
        (i % 4 == 0 ? val : train).push_back({q, {y}});
    }
    const auto r = train_dnn_baseline(train, val, 997, 16, quick(1e-2, 30, 3, 32));
    EXPECT_GE(r.history.epochs[r.history.best_epoch - 1].val_metric, 0.95);
}
