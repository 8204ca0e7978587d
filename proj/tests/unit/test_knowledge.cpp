#include "doctest.h"

#include <algorithm>
#include <map>

#include "kepil/errors.hpp"
#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/report.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/random.hpp"

using namespace kepil;
using namespace kepil::knowledge;

namespace {

const Resources& res() { return Resources::defaults(); }

std::vector<EntityMention> extract(const std::string& text) {
    return extract_entities({text, "r"}, res().lexicon, res().cues);
}

std::vector<std::tuple<std::string, EntityLabel, Status>> triples(const std::vector<EntityMention>& ms) {
    std::vector<std::tuple<std::string, EntityLabel, Status>> out;
    for (const auto& m : ms) out.emplace_back(m.entity, m.label, m.status);
    return out;
}

KnowledgeBase small_kb() {
    KnowledgeBase kb;
    kb.add(KnowledgeEntry{"atelectasis", "partial collapse of lung tissue.",
                          {{"texture", "smooth"}, {"shape", "streak"}}, {"synthetic"}});
    return kb;
}

} // namespace

TEST_CASE("resources load") {
    CHECK(res().lexicon.find("pneumothorax") != nullptr);
    CHECK(res().lexicon.find("left lung")->label == EntityLabel::Anat);
    CHECK(res().schema.keys() == std::vector<std::string>{"shape", "border", "texture", "location", "contrast"});
    CHECK(res().schema.canonical_key("margins") == "border");
    CHECK_FALSE(res().synonyms.empty());
    CHECK_FALSE(res().abbreviations.empty());
}

TEST_CASE("tokenize keeps offsets and splits punctuation") {
    auto t = tokenize("no pneumothorax. [SEP] x");
    REQUIRE(t.size() == 5);
    CHECK(t[1].text == "pneumothorax");
    CHECK(t[2].punct);
    CHECK(t[3].text == "[SEP]");
    CHECK(t[1].begin == 3);
    CHECK(t[1].end == 15);
}

TEST_CASE("extract: negation cue example") {
    auto ms = extract("no evidence of pneumothorax.");
    REQUIRE(ms.size() == 1);
    CHECK(ms[0].entity == "pneumothorax");
    CHECK(ms[0].label == EntityLabel::Obs);
    CHECK(ms[0].status == Status::Absent);
}

TEST_CASE("extract: blank report is rejected") {
    CHECK_THROWS_AS(extract("   "), ValidationError);
    CHECK_THROWS_AS(extract(""), ValidationError);
    Lexicon empty;
    CHECK_THROWS_AS(extract_entities({"opacity", "r"}, empty, res().cues), ValidationError);
}

TEST_CASE("extract: uncertainty cue scoped to nearest following OBS only") {
    auto ms = extract("possible opacity in the left lung.");
    auto expected = std::vector<std::tuple<std::string, EntityLabel, Status>>{
        {"opacity", EntityLabel::Obs, Status::Uncertain}, {"left lung", EntityLabel::Anat, Status::Present}};
    CHECK(triples(ms) == expected);

    // a cue is consumed by the first observation; the second stays present
    auto two = extract("no effusion or cardiomegaly.");
    REQUIRE(two.size() == 2);
    CHECK(two[0].entity == "pleural effusion");
    CHECK(two[0].status == Status::Absent);
    CHECK(two[1].status == Status::Present);
}

TEST_CASE("extract: cue window and sentence boundary") {
    // cue ends 5 tokens before the match -> inside the window
    CHECK(extract("no a b c d opacity")[0].status == Status::Absent);
    // 6 tokens away -> outside
    CHECK(extract("no a b c d e opacity")[0].status == Status::Present);
    // sentence boundary stops the cue
    CHECK(extract("no acute change. opacity")[0].status == Status::Present);
    CHECK(extract("no acute change; opacity")[0].status == Status::Present);
    // a comma does not end the sentence
    CHECK(extract("no change, opacity")[0].status == Status::Absent);
}

TEST_CASE("extract: closest cue wins, ties by priority") {
    CHECK(extract("no possible opacity")[0].status == Status::Uncertain);
    CHECK(extract("possible no opacity")[0].status == Status::Absent);
    CHECK(extract("cannot exclude pneumothorax")[0].status == Status::Uncertain);
    CHECK(extract("without edema")[0].status == Status::Absent);
    CHECK(extract("may represent atelectasis")[0].status == Status::Uncertain);
}

TEST_CASE("extract: longest match wins and spans index normalized text") {
    auto ms = extract("  Small   PLEURAL Effusion in the right lower zone. ");
    REQUIRE(ms.size() == 2);
    CHECK(ms[0].entity == "pleural effusion");
    CHECK(ms[0].surface == "pleural effusion");
    const std::string norm = normalize_text("  Small   PLEURAL Effusion in the right lower zone. ");
    for (const auto& m : ms) {
        CHECK(m.span_end <= norm.size());
        CHECK(norm.substr(m.span_begin, m.span_end - m.span_begin) == m.surface);
    }
    CHECK(ms[1].entity == "right lower zone");
    // "lung nodule" beats "nodule" even though both surfaces exist
    auto n = extract("lung nodule");
    REQUIRE(n.size() == 1);
    CHECK(n[0].span_end - n[0].span_begin == 11);
}

TEST_CASE("extract: synonym surfaces map to canonical names") {
    auto ms = extract("enlarged heart. collapse. airspace consolidation");
    REQUIRE(ms.size() == 3);
    CHECK(ms[0].entity == "cardiomegaly");
    CHECK(ms[1].entity == "atelectasis");
    CHECK(ms[2].entity == "consolidation");
}

TEST_CASE("lexicon rejects duplicate surfaces") {
    Lexicon lex;
    lex.add("effusion", EntityLabel::Obs);
    CHECK_THROWS_AS(lex.add("pleural effusion", EntityLabel::Obs, {"effusion"}), ValidationError);
    CHECK_THROWS_AS(lex.add("effusion", EntityLabel::Obs), ValidationError);
}

TEST_CASE("property: lexicon entry order never changes extraction") {
    const std::vector<std::string> sentences = {
        "no evidence of pneumothorax.", "possible opacity in the left lung.", "pleural effusion in the right lower zone.",
        "there is lung nodule in the left upper zone.", "without edema; may represent atelectasis.",
        "mass is seen in the right upper zone. no cardiomegaly.", "cannot exclude pulmonary nodule."};
    // random report texts drawn from the sentences above
    num::Rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<Lexicon::Entry> entries = res().lexicon.entries();
        rng.shuffle(entries);
        Lexicon permuted;
        for (const auto& e : entries) permuted.add(e.canonical, e.label, e.synonyms);
        std::string text;
        const auto k = 1 + rng.below(4);
        for (std::size_t i = 0; i < k; ++i) text += sentences[rng.below(sentences.size())] + " ";
        auto a = extract_entities({text, "r"}, res().lexicon, res().cues);
        auto b = extract_entities({text, "r"}, permuted, res().cues);
        CHECK(a == b);
        CHECK(a == extract_entities({text, "r"}, res().lexicon, res().cues));
    }
}

TEST_CASE("standardize examples") {
    CHECK(standardize({}).serialize().empty());
    auto single = standardize(extract("no evidence of pneumothorax."));
    CHECK(single.serialize() == "pneumothorax absent");
    auto two = standardize(extract("opacity in the left lung."));
    CHECK(two.serialize() == "opacity present [SEP] left lung present");
    // duplicate (entity, status) collapses, a different status does not
    auto dup = standardize(extract("opacity. opacity. no opacity."));
    CHECK(dup.serialize() == "opacity present [SEP] opacity absent");
}

TEST_CASE("property: parse inverts serialize") {
    num::Rng rng(5);
    const auto& entries = res().lexicon.entries();
    for (int trial = 0; trial < 100; ++trial) {
        StandardizedReport r;
        const auto n = rng.below(6);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& e = entries[rng.below(entries.size())];
            r.items.push_back({e.canonical, e.label, static_cast<Status>(rng.below(3))});
        }
        auto back = StandardizedReport::parse(r.serialize(), res().lexicon);
        CHECK(back == r);
    }
    CHECK_THROWS_AS(StandardizedReport::parse("opacity", res().lexicon), ValidationError);
    CHECK_THROWS_AS(StandardizedReport::parse("opacity maybe", res().lexicon), ValidationError);
    CHECK_THROWS_AS(StandardizedReport::parse("unicorn present", res().lexicon), LookupError);
}

TEST_CASE("build_vocabulary examples") {
    Lexicon lex;
    for (auto n : {"a", "b", "c"}) lex.add(n, EntityLabel::Obs);
    auto rep = [&](const std::string& s) { return StandardizedReport::parse(s, lex); };
    std::vector<StandardizedReport> corpus;
    for (int i = 0; i < 5; ++i) corpus.push_back(rep("a present"));
    for (int i = 0; i < 3; ++i) corpus.push_back(rep("b absent"));
    corpus.push_back(rep("c uncertain"));
    auto v = build_vocabulary(corpus, 2);
    CHECK(v.entries == std::vector<std::string>{"a", "b"});
    CHECK(v.counts == std::vector<std::size_t>{5, 3});
    CHECK(build_vocabulary(corpus, 10).entries.size() == 3);

    std::vector<StandardizedReport> tie;
    for (int i = 0; i < 3; ++i) tie.push_back(rep("b present [SEP] a present"));
    CHECK(build_vocabulary(tie, 1).entries == std::vector<std::string>{"a"});

    CHECK_THROWS_AS(build_vocabulary(corpus, 0), DomainError);
    CHECK_THROWS_AS(build_vocabulary({}, 3), ValidationError);
}

TEST_CASE("property: vocabulary counts match a brute-force recount") {
    num::Rng rng(11);
    const auto& entries = res().lexicon.entries();
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<StandardizedReport> corpus(1 + rng.below(20));
        for (auto& r : corpus) {
            const auto n = rng.below(5);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& e = entries[rng.below(8)];
                r.items.push_back({e.canonical, e.label, static_cast<Status>(rng.below(3))});
            }
        }
        const std::size_t m = 1 + rng.below(10);
        auto v = build_vocabulary(corpus, m);
        std::map<std::string, std::size_t> brute;
        for (const auto& r : corpus)
            for (const auto& it : r.items) brute[it.entity]++;
        CHECK(v.entries.size() == std::min(m, brute.size()));
        for (std::size_t i = 0; i < v.entries.size(); ++i) {
            CHECK(v.counts[i] == brute[v.entries[i]]);
            if (i > 0) {
                bool ordered = v.counts[i - 1] > v.counts[i] ||
                               (v.counts[i - 1] == v.counts[i] && v.entries[i - 1] < v.entries[i]);
                CHECK(ordered);
            }
        }
        // nothing left out beats the last kept entry
        if (!v.entries.empty())
            for (const auto& [name, c] : brute)
                if (std::find(v.entries.begin(), v.entries.end(), name) == v.entries.end())
                    CHECK((c < v.counts.back() || (c == v.counts.back() && name > v.entries.back())));
    }
}

TEST_CASE("normalize_entry examples") {
    const auto& schema = res().schema;
    KnowledgeEntry raw{"  Atelectasis ", "Partial  collapse of lung tissue",
                       {{"Margins", "Sharp"}, {"shape", "streak"}}, {"Synthetic"}};
    auto e = normalize_entry(raw, schema);
    CHECK(e.finding == "atelectasis");
    CHECK(e.definition == "partial collapse of lung tissue.");
    REQUIRE(e.features.size() == 5);
    CHECK(e.features[0] == Feature{"shape", "streak"});
    CHECK(e.features[1] == Feature{"border", "sharp"});
    CHECK(e.features[3] == Feature{"location", "unspecified"});
    CHECK(e.sources == std::vector<std::string>{"synthetic"});
    // already canonical input comes back unchanged
    CHECK(normalize_entry(e, schema) == e);

    KnowledgeEntry bad{"x", "def", {{"colour", "red"}, {"smell", "odd"}}, {}};
    try {
        normalize_entry(bad, schema);
        FAIL("expected a validation error");
    } catch (const ValidationError& err) {
        std::string msg = err.what();
        CHECK(msg.find("colour") != std::string::npos);
        CHECK(msg.find("smell") != std::string::npos);
    }
    CHECK_THROWS_AS(normalize_entry({"x", "  ", {}, {}}, schema), ValidationError);
    CHECK_THROWS_AS(normalize_entry({"", "d", {}, {}}, schema), ValidationError);
    CHECK_THROWS_AS(normalize_entry({"x", "d", {{"border", "a"}, {"margin", "b"}}, {}}, schema), ValidationError);
}

TEST_CASE("property: normalize_entry is idempotent") {
    const auto& schema = res().schema;
    const std::vector<std::string> keys = {"shape", "Form", "border", "EDGE", "texture", "site", "density", "contrast"};
    num::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        KnowledgeEntry raw{"Finding " + std::to_string(trial), "  Some   Definition text ", {}, {" a ", "B"}};
        std::vector<std::string> used;
        for (const auto& k : keys) {
            auto canon = *schema.canonical_key(k);
            if (rng.bernoulli(0.5) && std::find(used.begin(), used.end(), canon) == used.end()) {
                used.push_back(canon);
                raw.features.push_back({k, rng.bernoulli(0.2) ? "" : " Value " + std::to_string(rng.below(9))});
            }
        }
        auto once = normalize_entry(raw, schema);
        CHECK(normalize_entry(once, schema) == once);
        CHECK_FALSE(once.features.empty());
    }
}

TEST_CASE("enrich_prompt tiers") {
    const auto& schema = res().schema;
    auto kb = small_kb();
    CHECK(enrich_prompt("atelectasis", kb, PromptTier::NameOnly, schema).text == "atelectasis is present in the image.");
    CHECK(enrich_prompt("unicorn", kb, PromptTier::NameOnly, schema).text == "unicorn is present in the image.");
    CHECK(enrich_prompt("atelectasis", kb, PromptTier::NamePlusDefinition, schema).text ==
          "atelectasis is present in the image. partial collapse of lung tissue.");
    // features render in schema order regardless of storage order
    CHECK(enrich_prompt("atelectasis", kb, PromptTier::Full, schema).text ==
          "atelectasis is present in the image. partial collapse of lung tissue. "
          "Radiographic features: shape: streak; texture: smooth.");
    CHECK_THROWS_AS(enrich_prompt("unicorn", kb, PromptTier::Full, schema), LookupError);
    CHECK_THROWS_AS(enrich_prompt("unicorn", kb, PromptTier::NamePlusDefinition, schema), LookupError);
}

TEST_CASE("property: tiers are strict prefixes of each other") {
    const auto& schema = res().schema;
    KnowledgeBase kb;
    num::Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        KnowledgeEntry raw{"finding " + std::to_string(i), "definition number " + std::to_string(rng.below(100)),
                           {{"shape", "blob"}}, {}};
        if (rng.bernoulli(0.5)) raw.features.push_back({"location", "left lower zone"});
        kb.add(normalize_entry(raw, schema));
    }
    for (const auto& [name, e] : kb.entries()) {
        auto a = enrich_prompt(name, kb, PromptTier::NameOnly, schema).text;
        auto b = enrich_prompt(name, kb, PromptTier::NamePlusDefinition, schema).text;
        auto c = enrich_prompt(name, kb, PromptTier::Full, schema).text;
        CHECK(b.size() > a.size());
        CHECK(b.compare(0, a.size(), a) == 0);
        CHECK(c.size() > b.size());
        CHECK(c.compare(0, b.size(), b) == 0);
        for (const auto& f : e.features) CHECK(c.find(f.key + ": " + f.value) != std::string::npos);
    }
}

TEST_CASE("knowledge base text round trip") {
    const auto& schema = res().schema;
    KnowledgeBase kb;
    kb.add(normalize_entry({"opacity", "a region of increased attenuation", {{"shape", "blob"}}, {"a", "b"}}, schema));
    kb.add(normalize_entry({"nodule", "a small rounded focus", {{"texture", "speckled"}}, {}}, schema));
    auto back = KnowledgeBase::parse(kb.to_text());
    CHECK(back.entries() == kb.entries());
    CHECK_THROWS_AS(KnowledgeBase::parse("definition: orphan\n"), ValidationError);
    CHECK_THROWS_AS(KnowledgeBase::parse("name: x\ncolour: red\n"), ValidationError);
}

TEST_CASE("tier names parse") {
    for (auto t : {PromptTier::NameOnly, PromptTier::NamePlusDefinition, PromptTier::Full})
        CHECK(parse_tier(to_string(t)) == t);
    CHECK_THROWS_AS(parse_tier("huge"), ValidationError);
}
