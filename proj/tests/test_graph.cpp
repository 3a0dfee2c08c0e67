#include "gradcheck_util.hpp"

#include "ragdiff/graph.hpp"

#include <doctest.h>

using namespace ragdiff;
using namespace ragdiff::testutil;
using G = Graph<double>;

TEST_SUITE_BEGIN("graph");

TEST_CASE("lincomb and silu gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({3, 4, 4}, 1), random_tensor({3, 4, 4}, 2)};
    Tensor<double> target = random_tensor({3, 4, 4}, 3);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto y = g.lincomb(in[0], g.silu(in[1]), 0.7, -1.3);
        return g.mse_loss(y, target);
    };
    oc.run();
}

TEST_CASE("conv2d 3x3 stride 1 gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({3, 6, 6}, 1), random_tensor({5, 27}, 2, 0.3), random_tensor({5}, 3)};
    Tensor<double> target = random_tensor({5, 6, 6}, 4);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        return g.mse_loss(g.conv2d(in[0], in[1], in[2], 3, 1), target);
    };
    oc.run();
}

TEST_CASE("conv2d 3x3 stride 2 gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({2, 8, 8}, 5), random_tensor({4, 18}, 6, 0.3), random_tensor({4}, 7)};
    Tensor<double> target = random_tensor({4, 4, 4}, 8);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        return g.mse_loss(g.conv2d(in[0], in[1], in[2], 3, 2), target);
    };
    oc.run();
}

TEST_CASE("conv2d 1x1 gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({4, 5, 5}, 9), random_tensor({3, 4}, 10, 0.5), random_tensor({3}, 11)};
    Tensor<double> target = random_tensor({3, 5, 5}, 12);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        return g.mse_loss(g.conv2d(in[0], in[1], in[2], 1, 1), target);
    };
    oc.run();
}

TEST_CASE("group_norm gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({8, 3, 3}, 13), random_tensor({8}, 14, 0.5), random_tensor({8}, 15, 0.5)};
    Tensor<double> target = random_tensor({8, 3, 3}, 16);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        return g.mse_loss(g.group_norm(in[0], in[1], in[2], 4), target);
    };
    oc.run(1e-5);
}

TEST_CASE("linear, mean_rows, channel_bias gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({5, 6}, 17), random_tensor({4, 6}, 18, 0.4), random_tensor({4}, 19),
                 random_tensor({4, 2, 2}, 20)};
    Tensor<double> target = random_tensor({4, 2, 2}, 21);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto pooled = g.mean_rows(g.linear(in[0], in[1], in[2]));  // {1,4}
        auto y = g.channel_bias(in[3], pooled);
        return g.mse_loss(y, target);
    };
    oc.run();
}

TEST_CASE("embedding gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({7, 5}, 22)};
    Tensor<double> target = random_tensor({4, 5}, 23);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        return g.mse_loss(g.embedding(in[0], {3, 0, 3, 6}), target);
    };
    oc.run();
}

TEST_CASE("embedding rejects out-of-vocab ids") {
    Graph<double> g;
    auto table = g.input(random_tensor({4, 3}, 1));
    CHECK_THROWS_AS((void)g.embedding(table, {0, 4}), Error);
    CHECK_THROWS_AS((void)g.embedding(table, {-1}), Error);
}

TEST_CASE("concat, upsample, token reshape gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({2, 3, 3}, 24), random_tensor({3, 3, 3}, 25)};
    Tensor<double> target = random_tensor({5, 6, 6}, 26);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto y = g.upsample_nearest2(g.concat_channels(in[0], in[1]));
        auto tok = g.image_to_tokens(y);
        return g.mse_loss(g.tokens_to_image(tok, 6, 6), target);
    };
    oc.run();
}

TEST_CASE("mha gradients, single group") {
    OpCheck oc;
    oc.inputs = {random_tensor({5, 8}, 27),          // queries
                 random_tensor({7, 6}, 28),          // kv tokens (different width)
                 random_tensor({8, 8}, 29, 0.4),     // wq
                 random_tensor({8, 6}, 30, 0.4),     // wk
                 random_tensor({8, 6}, 31, 0.4),     // wv
                 random_tensor({8, 8}, 32, 0.4)};    // wo
    Tensor<double> target = random_tensor({5, 8}, 33);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto y = g.mha(in[0], {in[1]}, in[2], in[3], in[4], in[5], 2);
        return g.mse_loss(y, target);
    };
    oc.run(1e-5);
}

TEST_CASE("mha gradients, three groups") {
    OpCheck oc;
    oc.inputs = {random_tensor({4, 8}, 34),       random_tensor({3, 8}, 35), random_tensor({5, 8}, 36),
                 random_tensor({2, 8}, 37),       random_tensor({8, 8}, 38, 0.4),
                 random_tensor({8, 8}, 39, 0.4),  random_tensor({8, 8}, 40, 0.4),
                 random_tensor({8, 8}, 41, 0.4)};
    Tensor<double> target = random_tensor({4, 8}, 42);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto y = g.mha(in[0], {in[1], in[2], in[3]}, in[4], in[5], in[6], in[7], 4);
        return g.mse_loss(y, target);
    };
    oc.run(1e-5);
}

TEST_CASE("mha output is bit-identical under kv group permutation") {
    auto q = random_tensor({4, 8}, 50);
    auto a = random_tensor({3, 8}, 51);
    auto b = random_tensor({5, 8}, 52);
    auto c = random_tensor({2, 8}, 53);
    auto wq = random_tensor({8, 8}, 54, 0.4);
    auto wk = random_tensor({8, 8}, 55, 0.4);
    auto wv = random_tensor({8, 8}, 56, 0.4);
    auto wo = random_tensor({8, 8}, 57, 0.4);

    auto run = [&](std::vector<int> order) {
        Graph<double> g;
        std::vector<Graph<double>::Id> kv;
        std::vector<Tensor<double>*> groups = {&a, &b, &c};
        for (int i : order) kv.push_back(g.input(*groups[(size_t)i]));
        auto y = g.mha(g.input(q), kv, g.input(wq), g.input(wk), g.input(wv), g.input(wo), 2);
        return g.val(y);
    };
    Tensor<double> ref = run({0, 1, 2});
    std::vector<std::vector<int>> perms = {{0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& p : perms) CHECK(bit_equal(ref, run(p)));
}

TEST_CASE("mha with duplicated groups stays permutation-exact") {
    auto q = random_tensor({4, 8}, 60);
    auto a = random_tensor({3, 8}, 61);
    auto b = random_tensor({5, 8}, 62);
    auto run = [&](std::vector<const Tensor<double>*> groups) {
        Graph<double> g;
        std::vector<Graph<double>::Id> kv;
        for (auto* t : groups) kv.push_back(g.input(*t));
        auto wq = g.input(random_tensor({8, 8}, 63, 0.4));
        auto wk = g.input(random_tensor({8, 8}, 64, 0.4));
        auto wv = g.input(random_tensor({8, 8}, 65, 0.4));
        auto wo = g.input(random_tensor({8, 8}, 66, 0.4));
        return g.val(g.mha(g.input(q), kv, wq, wk, wv, wo, 2));
    };
    Tensor<double> ref = run({&a, &a, &b});
    CHECK(bit_equal(ref, run({&a, &b, &a})));
    CHECK(bit_equal(ref, run({&b, &a, &a})));
}

TEST_CASE("softmax cross-entropy gradients") {
    OpCheck oc;
    oc.inputs = {random_tensor({5, 7}, 70), random_tensor({6, 7}, 71, 0.4), random_tensor({6}, 72)};
    oc.build = [](G& g, std::vector<G::Id>& in) {
        auto logits = g.mean_rows(g.linear(in[0], in[1], in[2]));
        return g.softmax_ce(logits, 2);
    };
    oc.run();
}

TEST_CASE("shared parameter used twice accumulates both gradient paths") {
    // f(w) = mse(w*x1) + via second use: y = conv(x1,w) + conv(x2,w)
    OpCheck oc;
    oc.inputs = {random_tensor({2, 4, 4}, 80), random_tensor({2, 4, 4}, 81),
                 random_tensor({3, 18}, 82, 0.4), random_tensor({3}, 83)};
    Tensor<double> target = random_tensor({3, 4, 4}, 84);
    oc.build = [target](G& g, std::vector<G::Id>& in) {
        auto y1 = g.conv2d(in[0], in[2], in[3], 3, 1);
        auto y2 = g.conv2d(in[1], in[2], in[3], 3, 1);
        return g.mse_loss(g.add(y1, y2), target);
    };
    oc.run();
}

TEST_SUITE_END();
