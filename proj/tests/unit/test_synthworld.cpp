#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "kepil/errors.hpp"
#include "kepil/knowledge/report.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/synthworld/dataset.hpp"
#include "kepil/synthworld/world.hpp"
#include "kepil/util/binary_io.hpp"

using namespace kepil;
using namespace kepil::synth;
using knowledge::Status;

namespace {

const char* kZones[] = {"right upper zone", "left upper zone", "right lower zone", "left lower zone"};

double region_mean(const num::Tensor& img, const Region& r) {
    double s = 0;
    for (std::size_t i = r.r0; i < r.r1; ++i)
        for (std::size_t j = r.c0; j < r.c1; ++j) s += img(i, j);
    return s / static_cast<double>((r.r1 - r.r0) * (r.c1 - r.c0));
}

// A world with a single strong finding at a chosen zone.
WorldSpec single_finding_world(const std::string& zone, const std::string& contrast = "strong") {
    WorldSpec w;
    w.seed = 1;
    w.pool = DescriptorPool::standard();
    w.findings.push_back({"pneumothorax",
                          {{"shape", "blob"}, {"texture", "smooth"}, {"location", zone}, {"contrast", contrast}},
                          0.5,
                          Split::Seen});
    return w;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("kepil_synth_" + name);
    std::filesystem::remove_all(d);
    return d;
}

} // namespace

TEST_CASE("gen_world is deterministic per seed") {
    CHECK(gen_world(3, 12, 2, 2) == gen_world(3, 12, 2, 2));
    CHECK_FALSE(gen_world(3, 12, 2, 2) == gen_world(4, 12, 2, 2));
}

TEST_CASE("gen_world without unseen findings has no unseen split") {
    auto w = gen_world(5, 10, 0, 2);
    CHECK(w.indices(Split::Unseen).empty());
    CHECK(w.indices(Split::Rare).size() == 2);
    CHECK(w.indices(Split::Seen).size() == 8);
}

TEST_CASE("generated worlds: distinct findings, valid descriptors, compositional unseen, rare prevalence") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const std::size_t n = 6 + seed % 9;
        const std::size_t n_unseen = seed % 3;
        const std::size_t n_rare = 1 + seed % 2;
        auto w = gen_world(seed, n, n_unseen, n_rare);
        REQUIRE(w.findings.size() == n);
        std::set<std::string> names;
        for (const auto& f : w.findings) {
            names.insert(f.name);
            CHECK(f.prevalence > 0);
            CHECK(f.prevalence < 1);
            std::set<std::string> keys;
            for (const auto& d : f.descriptors) {
                CHECK(w.pool.contains(d));
                keys.insert(d.key);
            }
            CHECK(keys.size() == f.descriptors.size());
            if (f.split == Split::Rare) CHECK(f.prevalence <= 0.02);
        }
        CHECK(names.size() == n);
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b) CHECK_FALSE(w.findings[a].descriptors == w.findings[b].descriptors);
        for (auto u : w.indices(Split::Unseen))
            for (const auto& d : w.findings[u].descriptors) {
                bool shared = false;
                for (auto s : w.indices(Split::Seen)) shared |= w.findings[s].value(d.key) == d.value;
                CHECK_MESSAGE(shared, "unseen value " << d.value << " not used by any seen finding");
            }
    }
}

TEST_CASE("gen_world preconditions") {
    CHECK_THROWS_AS(gen_world(1, 4, 2, 2), DomainError);
    CHECK_THROWS_AS(gen_world(1, 49, 0, 1), DomainError);  // more than the pool's 48 combinations
    WorldOptions o;
    o.rare_prevalence = 0.05;
    CHECK_THROWS_AS(gen_world(1, 8, 1, 1, o), DomainError);
}

TEST_CASE("world text round trip and knowledge base") {
    auto w = gen_world(9, 12, 2, 2);
    CHECK(WorldSpec::parse(w.to_text()) == w);
    auto kb = world_knowledge_base(w);
    CHECK(kb.size() == w.findings.size());
    for (const auto& f : w.findings) {
        const auto& e = kb.at(f.name);
        for (const auto& d : f.descriptors) {
            bool found = false;
            for (const auto& feat : e.features) found |= feat.key == d.key && feat.value == d.value;
            CHECK(found);
        }
    }
    CHECK_THROWS_AS(WorldSpec::parse("not a world\n"), ValidationError);
}

TEST_CASE("all-negative image is background plus noise") {
    auto w = gen_world(2, 12, 2, 2);
    LabelVector none(w.findings.size(), 0);
    double total = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto img = render_image(none, w, s);
        double m = 0;
        for (double v : img.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            m += v;
        }
        m /= static_cast<double>(img.size());
        CHECK(std::abs(m - 0.1) <= 0.02);
        total += m;
    }
    CHECK(std::abs(total / 50 - 0.1) <= 0.02);
}

TEST_CASE("a strong finding brightens its own quadrant") {
    for (const char* zone : kZones) {
        auto w = single_finding_world(zone);
        for (std::uint64_t s = 0; s < 100; ++s) {
            auto img = render_image({1}, w, s);
            const double own = region_mean(img, location_region(zone, 32, 32));
            for (const char* other : kZones)
                if (std::string(other) != zone) CHECK(own > region_mean(img, location_region(other, 32, 32)));
        }
    }
}

TEST_CASE("right zones are drawn on the left of the image") {
    auto r = location_region("right upper zone", 32, 32);
    CHECK(r.c0 == 0);
    CHECK(r.r0 == 0);
    CHECK_THROWS_AS(location_region("apex", 32, 32), LookupError);
}

TEST_CASE("render_image is deterministic and seed dependent") {
    auto w = gen_world(2, 12, 2, 2);
    LabelVector l(w.findings.size(), 1);
    CHECK(render_image(l, w, 5) == render_image(l, w, 5));
    CHECK_FALSE(render_image(l, w, 5) == render_image(l, w, 6));
    CHECK(render_image(l, w, 5, Style::Shifted) == render_image(l, w, 5, Style::Shifted));
    CHECK_THROWS_AS(render_image({1}, w, 5), ShapeError);
}

TEST_CASE("shifted style raises the background and stays in range") {
    auto w = gen_world(2, 12, 2, 2);
    LabelVector none(w.findings.size(), 0);
    auto img = render_image(none, w, 3, Style::Shifted);
    double m = 0;
    for (double v : img.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        m += v;
    }
    m /= static_cast<double>(img.size());
    CHECK(m > 0.3);
}

TEST_CASE("all-negative report with no negative mentions is the fallback sentence") {
    auto w = gen_world(2, 12, 2, 2);
    ReportOptions o;
    o.negative_mention_rate = 0.0;
    auto r = write_report(LabelVector(w.findings.size(), 0), w, o, 1);
    CHECK(r.report.text == "no acute findings.");
    CHECK(r.intended.empty());
    CHECK(knowledge::extract_entities(r.report, knowledge::Resources::defaults().lexicon,
                                      knowledge::Resources::defaults().cues)
              .empty());
}

TEST_CASE("extract_entities recovers exactly what the report writer intended") {
    const auto& res = knowledge::Resources::defaults();
    for (std::uint64_t ws = 0; ws < 5; ++ws) {
        auto w = gen_world(ws, 14, 2, 2);
        num::Rng rng(ws);
        for (std::uint64_t i = 0; i < 200; ++i) {
            LabelVector l(w.findings.size());
            for (auto& x : l) x = rng.bernoulli(0.4);
            ReportOptions o;
            o.uncertainty_fraction = 0.3;
            o.synonym_rate = 0.5;
            auto r = write_report(l, w, o, num::derive_seed(ws, i));
            r.report.report_id = "r";
            auto mentions = knowledge::extract_entities(r.report, res.lexicon, res.cues);
            std::vector<std::pair<std::string, Status>> got;
            for (const auto& m : mentions) got.emplace_back(m.entity, m.status);
            CHECK_MESSAGE(got == r.intended, r.report.text);
        }
    }
}

TEST_CASE("positive finding yields a present mention") {
    const auto& res = knowledge::Resources::defaults();
    auto w = single_finding_world("left lower zone");
    for (std::uint64_t s = 0; s < 30; ++s) {
        ReportOptions o;
        o.uncertainty_fraction = 0.0;
        auto r = write_report({1}, w, o, s);
        auto m = knowledge::extract_entities(r.report, res.lexicon, res.cues);
        bool present = false;
        for (const auto& x : m) present |= x.entity == "pneumothorax" && x.status == Status::Present;
        CHECK_MESSAGE(present, r.report.text);
    }
}

TEST_CASE("uncertainty fraction 1 makes every positive mention uncertain") {
    const auto& res = knowledge::Resources::defaults();
    auto w = gen_world(4, 12, 2, 2);
    ReportOptions o;
    o.uncertainty_fraction = 1.0;
    o.negative_mention_rate = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        LabelVector l(w.findings.size(), static_cast<std::uint8_t>(s % 2));
        l[s % l.size()] = 1;
        auto r = write_report(l, w, o, s);
        for (const auto& m : knowledge::extract_entities(r.report, res.lexicon, res.cues))
            if (m.label == knowledge::EntityLabel::Obs) CHECK(m.status == Status::Uncertain);
    }
}

TEST_CASE("positive counts follow prevalence within binomial bounds") {
    auto w = gen_world(6, 12, 2, 2);
    w.findings[0].prevalence = 0.5;
    const auto rare = w.indices(Split::Rare).front();
    auto ds = gen_dataset(w, 1000, Style::Primary, 77);
    REQUIRE(ds.size() == 1000);
    std::size_t half = 0, rare_pos = 0;
    for (const auto& s : ds) {
        half += s.labels[0];
        rare_pos += s.labels[rare];
    }
    CHECK(half >= 440);
    CHECK(half <= 560);
    CHECK(rare_pos >= 5);
    CHECK(rare_pos <= 35);
}

TEST_CASE("training data can exclude unseen findings") {
    auto w = gen_world(6, 12, 2, 2);
    DatasetOptions o;
    o.include_unseen = false;
    const auto& res = knowledge::Resources::defaults();
    for (const auto& s : gen_dataset(w, 300, Style::Primary, 1, o)) {
        for (auto u : w.indices(Split::Unseen)) CHECK(s.labels[u] == 0);
        for (const auto& m : knowledge::extract_entities(s.report, res.lexicon, res.cues))
            for (auto u : w.indices(Split::Unseen)) CHECK(m.entity != w.findings[u].name);
    }
    CHECK_THROWS_AS(gen_dataset(w, 0, Style::Primary, 1), DomainError);
}

TEST_CASE("gen_dataset is deterministic and samples are seeded by index") {
    auto w = gen_world(6, 12, 2, 2);
    auto a = gen_dataset(w, 20, Style::Shifted, 5);
    auto b = gen_dataset(w, 20, Style::Shifted, 5);
    CHECK(a == b);
    CHECK(encode_samples(a) == encode_samples(b));
    auto longer = gen_dataset(w, 30, Style::Shifted, 5);
    for (std::size_t i = 0; i < 20; ++i) CHECK(longer[i] == a[i]);
    for (const auto& s : a) CHECK(s.style == Style::Shifted);
}

TEST_CASE("strong-finding oracle is at least 99% accurate in both styles") {
    for (std::uint64_t ws : {7ULL, 21ULL}) {
        auto w = gen_world(ws, 12, 2, 2);
        for (Style st : {Style::Primary, Style::Shifted}) {
            auto ds = gen_dataset(w, 1000, st, ws + 100);
            std::size_t correct = 0, total = 0;
            for (const auto& s : ds)
                for (const char* zone : kZones) {
                    bool truth = false;
                    for (std::size_t f = 0; f < w.findings.size(); ++f)
                        truth |= s.labels[f] && w.findings[f].value("location") == zone &&
                                 w.findings[f].value("contrast") == "strong";
                    correct += strong_finding_oracle(s.image, zone, st) == truth;
                    ++total;
                }
            const double acc = static_cast<double>(correct) / static_cast<double>(total);
            CHECK_MESSAGE(acc >= 0.99, to_string(st) << " accuracy " << acc);
        }
    }
}

TEST_CASE("sample files round trip and reject corruption") {
    auto w = gen_world(6, 12, 2, 2);
    auto ds = gen_dataset(w, 15, Style::Primary, 3);
    CHECK(decode_samples(encode_samples(ds)) == ds);
    auto bytes = encode_samples(ds);
    CHECK_THROWS_AS(decode_samples(bytes.substr(0, bytes.size() - 3)), LoadError);
    CHECK_THROWS_AS(decode_samples("XXXXXXXX" + bytes.substr(8)), LoadError);
    CHECK_THROWS_AS(decode_samples(bytes + "x"), LoadError);
}

TEST_CASE("dataset directory round trip with checksum verification") {
    auto dir = temp_dir("bundle");
    DatasetBundle b;
    b.world = gen_world(6, 12, 2, 2);
    b.kb = world_knowledge_base(b.world);
    b.splits["train"] = gen_dataset(b.world, 10, Style::Primary, 1);
    b.splits["shifted"] = gen_dataset(b.world, 5, Style::Shifted, 2);
    write_dataset(dir, b);
    auto r = read_dataset(dir);
    CHECK(r.world == b.world);
    CHECK(r.kb.to_text() == b.kb.to_text());
    CHECK(r.split("train") == b.splits["train"]);
    CHECK(r.split("shifted") == b.splits["shifted"]);
    CHECK_THROWS_AS(r.split("test"), LookupError);

    util::write_file(dir / "train.bin", encode_samples(gen_dataset(b.world, 10, Style::Primary, 99)));
    CHECK_THROWS_AS(read_dataset(dir), LoadError);
    CHECK_THROWS_AS(read_dataset(temp_dir("missing")), IoError);
    std::filesystem::remove_all(dir);
}
