#include <catch2/catch_amalgamated.hpp>

#include "condet/corruption.hpp"

using condet::Box;
using condet::BoxArray;
using condet::ProposalSet;
using condet::Rng;

TEST_CASE("pad_ground_truth counts and prefix") {
    Rng rng(5);
    std::vector<Box> gt = {{0.3, 0.3, 0.2, 0.2}, {0.6, 0.6, 0.1, 0.1}, {0.8, 0.2, 0.15, 0.3}};
    auto set = condet::pad_ground_truth(gt, 300, rng);
    REQUIRE(set.count() == 300);
    for (int i = 0; i < 3; ++i) {
        auto s = condet::to_signal_space(gt[i]);
        for (int c = 0; c < 4; ++c) CHECK(set.boxes(i, c) == s[c]);
    }
}

TEST_CASE("pad_ground_truth empty GT yields all-auxiliary set") {
    Rng rng(6);
    auto set = condet::pad_ground_truth({}, 300, rng);
    REQUIRE(set.count() == 300);
}

TEST_CASE("pad_ground_truth subsamples oversized GT") {
    Rng rng(7);
    std::vector<Box> gt(305);
    for (int i = 0; i < 305; ++i) gt[i] = Box{i / 1000.0, i / 1000.0, 0.01, 0.01};
    auto set = condet::pad_ground_truth(gt, 300, rng);
    REQUIRE(set.count() == 300);
    // every output row equals some GT row
    for (int i = 0; i < 300; ++i) {
        bool found = false;
        for (const auto& g : gt) {
            auto s = condet::to_signal_space(g);
            if (set.boxes(i, 0) == s[0] && set.boxes(i, 1) == s[1]) found = true;
        }
        CHECK(found);
    }
}

TEST_CASE("pad_ground_truth is deterministic per seed") {
    std::vector<Box> gt = {{0.4, 0.4, 0.2, 0.2}};
    Rng a(99), b(99), c(100);
    auto s1 = condet::pad_ground_truth(gt, 64, a);
    auto s2 = condet::pad_ground_truth(gt, 64, b);
    auto s3 = condet::pad_ground_truth(gt, 64, c);
    CHECK((s1.boxes - s2.boxes).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s1.boxes - s3.boxes).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("corrupt basics") {
    ProposalSet xs;
    xs.boxes = BoxArray::Zero(4, 4);
    xs.boxes(0, 0) = 0.2;
    BoxArray eps = BoxArray::Zero(4, 4);

    auto same = condet::corrupt(xs, 0.7, eps);
    CHECK(same.boxes(0, 0) == 0.2);
    CHECK(same.sigma == 0.7);

    eps(0, 0) = 1.0;
    auto moved = condet::corrupt(xs, 0.5, eps);
    CHECK(moved.boxes(0, 0) == Catch::Approx(0.7).margin(1e-15));

    auto zero_sigma = condet::corrupt(xs, 0.0, eps);
    CHECK(zero_sigma.boxes(0, 0) == 0.2);

    BoxArray bad = BoxArray::Zero(3, 4);
    CHECK_THROWS_AS(condet::corrupt(xs, 0.5, bad), std::invalid_argument);
}

TEST_CASE("corrupt is affine in epsilon") {
    Rng rng(21);
    ProposalSet xs{condet::gaussian_boxes(8, rng), 0.0};
    BoxArray e1 = condet::gaussian_boxes(8, rng);
    BoxArray e2 = condet::gaussian_boxes(8, rng);
    double a = 0.7, b = -1.3, sigma = 2.5;
    BoxArray mixed = condet::corrupt(xs, sigma, a * e1 + b * e2).boxes;
    BoxArray combined = a * condet::corrupt(xs, sigma, e1).boxes + b * condet::corrupt(xs, sigma, e2).boxes -
                        (a + b - 1) * xs.boxes;
    CHECK((mixed - combined).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("scale_for_decoder applies c_in/2") {
    condet::NoiseSchedule sched;
    Rng rng(31);
    ProposalSet xt{condet::gaussian_boxes(5, rng), 0.0};

    // sigma = 0: c_in = 2 so c_in/2 = 1, identity
    auto ident = condet::scale_for_decoder(xt, sched);
    CHECK((ident - xt.boxes).cwiseAbs().maxCoeff() < 1e-15);

    xt.sigma = sched.sigma_max;
    auto scaled = condet::scale_for_decoder(xt, sched);
    double factor = scaled(0, 0) / xt.boxes(0, 0);
    CHECK(factor == Catch::Approx(0.00624987793326366).epsilon(1e-9));

    ProposalSet zero{BoxArray::Zero(3, 4), 1.0};
    CHECK(condet::scale_for_decoder(zero, sched).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("box_renewal keeps rows at or above the threshold") {
    Rng rng(41);
    ProposalSet xb{condet::gaussian_boxes(3, rng), 1.0};
    ProposalSet x0{condet::gaussian_boxes(3, rng), 1.0};
    std::vector<double> scores = {0.99, 0.50, 0.985};

    auto r = condet::box_renewal(scores, xb, x0, 0.98);
    REQUIRE(r.n_r == 2);
    CHECK(r.x_b.boxes.row(0) == xb.boxes.row(0));
    CHECK(r.x_b.boxes.row(1) == xb.boxes.row(2));
    CHECK(r.x_0.boxes.row(1) == x0.boxes.row(2));

    auto all = condet::box_renewal(scores, xb, x0, 0.0);
    CHECK(all.n_r == 3);
    CHECK((all.x_b.boxes - xb.boxes).cwiseAbs().maxCoeff() == 0.0);

    auto none = condet::box_renewal(scores, xb, x0, 1.0);
    CHECK(none.n_r == 0);
    CHECK(none.x_b.count() == 0);
}

TEST_CASE("supplement_proposals restores cardinality") {
    Rng rng(51);
    ProposalSet x{condet::gaussian_boxes(2, rng), 1.0};

    auto full = condet::supplement_proposals(x, 5, 0.0, rng);
    REQUIRE(full.count() == 5);
    for (int i = 2; i < 5; ++i)
        for (int c = 0; c < 4; ++c) CHECK(full.boxes(i, c) == 0.0);

    ProposalSet same{condet::gaussian_boxes(5, rng), 1.0};
    auto unchanged = condet::supplement_proposals(same, 5, 2.0, rng);
    CHECK((unchanged.boxes - same.boxes).cwiseAbs().maxCoeff() == 0.0);

    ProposalSet empty{BoxArray(0, 4), 1.0};
    auto fresh = condet::supplement_proposals(empty, 500, 3.0, rng);
    CHECK(fresh.count() == 500);

    ProposalSet big{condet::gaussian_boxes(6, rng), 1.0};
    CHECK_THROWS_AS(condet::supplement_proposals(big, 5, 1.0, rng), std::invalid_argument);
}

TEST_CASE("around-GT padding mode stays near GT") {
    Rng rng(61);
    std::vector<Box> gt = {{0.5, 0.5, 0.2, 0.2}};
    auto set = condet::pad_ground_truth(gt, 50, rng, condet::PaddingMode::kAroundGt);
    REQUIRE(set.count() == 50);
    // jittered copies concentrate around the GT signal coordinates
    auto s = condet::to_signal_space(gt[0]);
    int close = 0;
    for (int i = 1; i < 50; ++i)
        if (std::abs(set.boxes(i, 0) - s[0]) < 2.0) ++close;
    CHECK(close == 49);
}
