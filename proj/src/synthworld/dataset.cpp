#include "kepil/synthworld/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/binary_io.hpp"

namespace kepil::synth {

using num::Rng;
using num::Tensor;

const char* to_string(Style s) { return s == Style::Primary ? "primary" : "shifted"; }

Style parse_style(const std::string& s) {
    if (s == "primary") return Style::Primary;
    if (s == "shifted") return Style::Shifted;
    throw ValidationError("unknown image style '" + s + "'");
}

Region location_region(const std::string& location, std::size_t height, std::size_t width) {
    const std::size_t h2 = height / 2, w2 = width / 2;
    // patient's right is on the viewer's left
    if (location == "right upper zone") return {0, h2, 0, w2};
    if (location == "left upper zone") return {0, h2, w2, width};
    if (location == "right lower zone") return {h2, height, 0, w2};
    if (location == "left lower zone") return {h2, height, w2, width};
    throw LookupError("no image region for location '" + location + "'");
}

namespace {

// Coverage mask of a shape centred at (cy, cx); q is the region size.
bool inside(const std::string& shape, double dy, double dx, double q) {
    if (shape == "blob") return dy * dy + dx * dx <= (0.28 * q) * (0.28 * q);
    if (shape == "ring") {
        const double r = std::sqrt(dy * dy + dx * dx);
        return r <= 0.36 * q && r >= 0.36 * q - 1.8;
    }
    if (shape == "streak") {
        // diagonal bar, top-left to bottom-right
        const double along = (dy + dx) / std::sqrt(2.0);
        const double across = (dy - dx) / std::sqrt(2.0);
        return std::abs(along) <= 0.4 * q && std::abs(across) <= 1.1;
    }
    throw LookupError("no renderer for shape '" + shape + "'");
}

} // namespace

Tensor render_image(const LabelVector& labels, const WorldSpec& world, std::uint64_t seed, Style style,
                    const RenderOptions& o) {
    if (labels.size() != world.findings.size())
        throw ShapeError("render_image: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(world.findings.size()) + " findings");
    Rng rng(seed);
    Tensor img({o.height, o.width}, o.background);
    for (std::size_t f = 0; f < labels.size(); ++f) {
        if (!labels[f]) continue;
        const auto& spec = world.findings[f];
        const Region reg = location_region(spec.value("location"), o.height, o.width);
        const double q = static_cast<double>(std::min(reg.r1 - reg.r0, reg.c1 - reg.c0));
        const int span = 2 * o.jitter + 1;
        const double cy = 0.5 * static_cast<double>(reg.r0 + reg.r1) - 0.5 +
                          static_cast<double>(static_cast<int>(rng.below(static_cast<std::size_t>(span))) - o.jitter);
        const double cx = 0.5 * static_cast<double>(reg.c0 + reg.c1) - 0.5 +
                          static_cast<double>(static_cast<int>(rng.below(static_cast<std::size_t>(span))) - o.jitter);
        const double amp = spec.value("contrast") == "strong" ? o.strong : o.faint;
        const bool speckled = spec.value("texture") == "speckled";
        const auto& shape = spec.value("shape");
        for (std::size_t r = reg.r0; r < reg.r1; ++r)
            for (std::size_t c = reg.c0; c < reg.c1; ++c) {
                if (!inside(shape, static_cast<double>(r) - cy, static_cast<double>(c) - cx, q)) continue;
                double a = amp;
                if (speckled && rng.below(2) == 0) a *= 0.45;
                img(r, c) += a;
            }
    }
    for (double& v : img.values()) v += rng.normal(0.0, o.noise_sd);
    if (style == Style::Shifted) {
        const double s = o.inversion_strength;
        const std::size_t phase = o.band_period ? rng.below(2 * o.band_period) : 0;
        for (std::size_t r = 0; r < o.height; ++r) {
            const bool band = o.band_period && ((r + phase) / o.band_period) % 2 == 0;
            for (std::size_t c = 0; c < o.width; ++c) {
                double& v = img(r, c);
                v = (1.0 - s) * v + s * (1.0 - v);
                if (band) v += o.band_amplitude;
            }
        }
    }
    for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

bool strong_finding_oracle(const Tensor& image, const std::string& location, Style style, const RenderOptions& o) {
    const Region reg = location_region(location, image.rows(), image.cols());
    std::vector<double> v;
    for (std::size_t r = reg.r0; r < reg.r1; ++r)
        for (std::size_t c = reg.c0; c < reg.c1; ++c) v.push_back(image(r, c));
    auto sorted = v;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double median = sorted[sorted.size() / 2];
    const double scale = style == Style::Shifted ? 1.0 - 2.0 * o.inversion_strength : 1.0;
    const double threshold = 0.85 * o.strong * scale;
    std::size_t count = 0;
    for (double x : v) count += x - median > threshold;
    return count >= 6;
}

WrittenReport write_report(const LabelVector& labels, const WorldSpec& world, const ReportOptions& options,
                           std::uint64_t seed, const knowledge::Resources& res) {
    using knowledge::Status;
    if (labels.size() != world.findings.size())
        throw ShapeError("write_report: label count does not match the world");
    Rng rng(seed);
    struct Sentence {
        std::string text;
        std::vector<std::pair<std::string, Status>> items;
    };
    std::vector<Sentence> sentences;

    auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };
    std::vector<std::string> neg_cues, unc_cues;
    for (const auto& g : res.cues.negation) neg_cues.insert(neg_cues.end(), g.begin(), g.end());
    for (const auto& g : res.cues.uncertainty) unc_cues.insert(unc_cues.end(), g.begin(), g.end());

    auto surface = [&](const std::string& name) {
        const auto* e = res.lexicon.find(name);
        if (!e) throw LookupError("write_report: finding '" + name + "' is not in the lexicon");
        if (e->synonyms.empty() || rng.below(1000) >= static_cast<std::size_t>(std::llround(options.synonym_rate * 1000)))
            return name;
        return pick(e->synonyms);
    };

    for (std::size_t f = 0; f < labels.size(); ++f) {
        const auto& spec = world.findings[f];
        if (spec.split == Split::Unseen && !options.mention_unseen) {
            if (labels[f]) throw ValidationError("write_report: positive unseen finding with mention_unseen off");
            continue;
        }
        const std::string zone = spec.value("location");
        if (labels[f]) {
            const bool uncertain = rng.uniform() < options.uncertainty_fraction;
            const std::string name = surface(spec.name);
            std::string text;
            if (uncertain) {
                text = pick(unc_cues) + " " + name + " in the " + zone + ".";
            } else {
                switch (rng.below(3)) {
                    case 0: text = name + " in the " + zone + "."; break;
                    case 1: text = "there is " + name + " in the " + zone + "."; break;
                    default: text = name + " is seen in the " + zone + "."; break;
                }
            }
            sentences.push_back({text, {{spec.name, uncertain ? Status::Uncertain : Status::Present}, {zone, Status::Present}}});
        } else if (rng.uniform() < options.negative_mention_rate) {
            sentences.push_back({pick(neg_cues) + " " + surface(spec.name) + ".", {{spec.name, Status::Absent}}});
        }
    }
    rng.shuffle(sentences);
    WrittenReport out;
    std::vector<std::string> texts;
    for (auto& s : sentences) {
        texts.push_back(s.text);
        out.intended.insert(out.intended.end(), s.items.begin(), s.items.end());
    }
    out.report.text = texts.empty() ? std::string(kNoFindingsSentence) : knowledge::join(texts, " ");
    return out;
}

std::vector<SyntheticSample> gen_dataset(const WorldSpec& world, std::size_t n, Style style, std::uint64_t seed,
                                         const DatasetOptions& options) {
    if (n == 0) throw DomainError("gen_dataset: n must be at least 1");
    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = num::derive_seed(seed, i);
        Rng rng(num::derive_seed(s, 0));
        LabelVector labels(world.findings.size(), 0);
        for (std::size_t f = 0; f < labels.size(); ++f) {
            const auto& spec = world.findings[f];
            const double prev = (spec.split == Split::Unseen && !options.include_unseen) ? 0.0 : spec.prevalence;
            labels[f] = rng.uniform() < prev ? 1 : 0;
        }
        SyntheticSample sample;
        sample.image = render_image(labels, world, num::derive_seed(s, 1), style, options.render);
        auto report_options = options.report;
        if (!options.include_unseen) report_options.mention_unseen = false;
        sample.report = write_report(labels, world, report_options, num::derive_seed(s, 2)).report;
        sample.report.report_id = options.id_prefix + "-" + std::to_string(i);
        sample.labels = std::move(labels);
        sample.style = style;
        out.push_back(std::move(sample));
    }
    return out;
}

namespace {
constexpr const char* kSampleMagic = "KEPILDS1";
constexpr std::uint32_t kSampleVersion = 1;
}

std::string encode_samples(const std::vector<SyntheticSample>& samples) {
    util::ByteWriter w;
    w.raw(kSampleMagic);
    w.u32(kSampleVersion);
    w.u64(samples.size());
    for (const auto& s : samples) {
        w.u32(static_cast<std::uint32_t>(s.image.rows()));
        w.u32(static_cast<std::uint32_t>(s.image.cols()));
        for (double v : s.image.values()) w.f64(v);
        w.str(s.report.report_id);
        w.str(s.report.text);
        w.u32(static_cast<std::uint32_t>(s.labels.size()));
        for (auto l : s.labels) w.u8(l);
        w.u8(static_cast<std::uint8_t>(s.style));
    }
    return w.bytes();
}

std::vector<SyntheticSample> decode_samples(const std::string& bytes) {
    util::ByteReader r(bytes, "sample file");
    if (r.raw(8) != kSampleMagic) throw LoadError("sample file: bad magic");
    if (r.u32() != kSampleVersion) throw LoadError("sample file: unsupported version");
    const auto n = r.u64();
    std::vector<SyntheticSample> out;
    for (std::uint64_t i = 0; i < n; ++i) {
        SyntheticSample s;
        const auto h = r.u32(), wd = r.u32();
        s.image = Tensor({h, wd});
        for (double& v : s.image.values()) v = r.f64();
        s.report.report_id = r.str();
        s.report.text = r.str();
        const auto nl = r.u32();
        s.labels.resize(nl);
        for (auto& l : s.labels) {
            l = r.u8();
            if (l > 1) throw LoadError("sample file: bad label byte");
        }
        const auto st = r.u8();
        if (st > 1) throw LoadError("sample file: bad style byte");
        s.style = static_cast<Style>(st);
        out.push_back(std::move(s));
    }
    if (!r.done()) throw LoadError("sample file: trailing bytes");
    return out;
}

void save_samples(const std::filesystem::path& path, const std::vector<SyntheticSample>& samples) {
    util::write_file(path, encode_samples(samples));
}

std::vector<SyntheticSample> load_samples(const std::filesystem::path& path) {
    try {
        return decode_samples(util::read_file(path));
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

const std::vector<SyntheticSample>& DatasetBundle::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw LookupError("dataset has no split '" + name + "'");
    return it->second;
}

std::map<std::string, std::string> dataset_files(const DatasetBundle& bundle) {
    std::map<std::string, std::string> files;
    auto sum = [](const std::string& bytes) { return util::hex64(util::fnv1a64(bytes)); };
    files["world.txt"] = bundle.world.to_text();
    files["kb.txt"] = bundle.kb.to_text();
    std::ostringstream manifest;
    manifest << "kepil-dataset 1\n";
    for (const auto& [split, samples] : bundle.splits) {
        const std::string file = split + ".bin";
        files[file] = encode_samples(samples);
        manifest << "split " << split << " " << file << " " << samples.size() << " " << sum(files[file]) << "\n";
    }
    manifest << "file world.txt " << sum(files["world.txt"]) << "\n";
    manifest << "file kb.txt " << sum(files["kb.txt"]) << "\n";
    files["manifest.txt"] = manifest.str();
    return files;
}

std::map<std::string, std::string> write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    std::map<std::string, std::string> sums;
    for (const auto& [name, bytes] : dataset_files(bundle)) {
        util::write_file(dir / name, bytes);
        sums[name] = util::hex64(util::fnv1a64(bytes));
    }
    return sums;
}

DatasetBundle read_dataset(const std::filesystem::path& dir) {
    const std::string manifest = util::read_file(dir / "manifest.txt");
    std::istringstream in(manifest);
    std::string line;
    if (!std::getline(in, line) || line != "kepil-dataset 1")
        throw LoadError((dir / "manifest.txt").string() + ": not a dataset manifest");
    auto checked = [&](const std::string& file, const std::string& sum) {
        std::string bytes = util::read_file(dir / file);
        if (util::hex64(util::fnv1a64(bytes)) != sum)
            throw LoadError((dir / file).string() + ": checksum does not match the manifest");
        return bytes;
    };
    DatasetBundle b;
    bool have_world = false, have_kb = false;
    while (std::getline(in, line)) {
        auto f = knowledge::split_whitespace(line);
        if (f.empty()) continue;
        if (f[0] == "split" && f.size() == 5) {
            auto samples = decode_samples(checked(f[2], f[4]));
            if (std::to_string(samples.size()) != f[3])
                throw LoadError((dir / f[2]).string() + ": sample count does not match the manifest");
            b.splits[f[1]] = std::move(samples);
        } else if (f[0] == "file" && f.size() == 3 && f[1] == "world.txt") {
            b.world = WorldSpec::parse(checked(f[1], f[2]));
            have_world = true;
        } else if (f[0] == "file" && f.size() == 3 && f[1] == "kb.txt") {
            b.kb = knowledge::KnowledgeBase::parse(checked(f[1], f[2]));
            have_kb = true;
        } else {
            throw LoadError((dir / "manifest.txt").string() + ": bad line '" + line + "'");
        }
    }
    if (!have_world || !have_kb) throw LoadError((dir / "manifest.txt").string() + ": missing world or kb entry");
    for (const auto& [name, samples] : b.splits)
        for (const auto& s : samples)
            if (s.labels.size() != b.world.findings.size())
                throw LoadError("split " + name + ": label vectors do not match the world");
    return b;
}

} // namespace kepil::synth
