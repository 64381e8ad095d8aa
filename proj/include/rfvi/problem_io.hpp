#pragma once

#include "rfvi/core.hpp"
#include "rfvi/problems.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

// Textual instance container (version 1) so experiments are replayable across
// runs. Values are written with 17 significant digits, which round-trips
// IEEE-754 doubles exactly. Only affine mappings are serializable; both
// experiment games are affine. Layout of the format is documented in README.

namespace rfvi {

namespace detail {

inline void write_vector(std::ostream& os, const Vector& v) {
    for (Index i = 0; i < v.size(); ++i)
        os << (i ? " " : "") << v[i];
    os << "\n";
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c)
            os << (c ? " " : "") << m(r, c);
        os << "\n";
    }
}

class LineReader {
  public:
    explicit LineReader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}

    std::string next() {
        std::string line;
        while (std::getline(is_, line)) {
            ++line_no_;
            if (!line.empty())
                return line;
        }
        fail("unexpected end of file");
        return {};
    }

    Vector read_vector(Index n) {
        std::istringstream ss(next());
        Vector v(n);
        for (Index i = 0; i < n; ++i)
            if (!(ss >> v[i]))
                fail("expected " + std::to_string(n) + " numbers");
        return v;
    }

    Matrix read_matrix(Index rows, Index cols) {
        Matrix m(rows, cols);
        for (Index r = 0; r < rows; ++r)
            m.row(r) = read_vector(cols).transpose();
        return m;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error(origin_ + ":" + std::to_string(line_no_) + ": " + what);
    }

    int line() const { return line_no_; }

  private:
    std::istream& is_;
    std::string origin_;
    int line_no_ = 0;
};

}  // namespace detail

inline void save_instance(std::ostream& os, const ProblemInstance& inst,
                          const std::string& initial_kind) {
    if (!inst.mapping.affine)
        throw std::invalid_argument("save_instance: only affine mappings are serializable");
    os << std::setprecision(17);
    os << "rfvi-instance 1\n";
    os << "name " << inst.name << "\n";
    os << "layout " << inst.layout.agents();
    for (Index j = 0; j < inst.layout.agents(); ++j)
        os << " " << inst.layout.size(j);
    os << "\n";
    os << "mu " << inst.mapping.mu << "\n";
    os << "lipschitz " << inst.mapping.lipschitz << "\n";
    os << "affine " << inst.mapping.affine->matrix.rows() << "\n";
    detail::write_matrix(os, inst.mapping.affine->matrix);
    os << "offset\n";
    detail::write_vector(os, inst.mapping.affine->offset);
    if (inst.xstar) {
        os << "xstar present\n";
        detail::write_vector(os, *inst.xstar);
    } else {
        os << "xstar absent\n";
    }
    os << "initial " << initial_kind << "\n";
    for (const SimpleSet& s : inst.sets) {
        switch (s.kind()) {
        case SimpleSet::Kind::FullSpace:
            os << "set fullspace " << s.dimension() << "\n";
            break;
        case SimpleSet::Kind::Box:
            os << "set box " << s.dimension() << "\n";
            detail::write_vector(os, s.lower());
            detail::write_vector(os, s.upper());
            break;
        case SimpleSet::Kind::Ball:
            os << "set ball " << s.dimension() << " " << s.radius() << "\n";
            detail::write_vector(os, s.center());
            break;
        }
    }
    for (const auto& fam : inst.families) {
        if (!fam) {
            os << "family none\n";
            continue;
        }
        if (auto quad = dynamic_cast<const QuadraticConstraintFamily*>(fam.get())) {
            os << "family quadratic " << quad->agent() << " " << quad->count() << " "
               << quad->max_lambda() << " " << quad->box_radius() << "\n";
            auto w = quad->feasible_witness(Vector());
            if (w) {
                os << "witness present\n";
                detail::write_vector(os, *w);
            } else {
                os << "witness absent\n";
            }
            for (std::size_t i = 0; i < quad->count(); ++i) {
                detail::write_matrix(os, quad->q_matrix(i));
                detail::write_vector(os, quad->b_vector(i));
                os << quad->c_scalar(i) << "\n";
            }
        } else if (auto imi = dynamic_cast<const ImitationExplorationFamily*>(fam.get())) {
            os << "family imitation " << imi->agent() << " " << imi->dimension() << " "
               << imi->xi_max() << " " << imi->anchor_offset() << " " << imi->mg_bound() << "\n";
        } else {
            throw std::invalid_argument("save_instance: unsupported family type");
        }
    }
}

struct LoadedInstance {
    ProblemInstance instance;
    std::string initial_kind;
};

inline LoadedInstance load_instance(std::istream& is, const std::string& origin = "<instance>") {
    detail::LineReader in(is, origin);
    auto expect_word = [&](std::istringstream& ss, const std::string& word) {
        std::string got;
        ss >> got;
        if (got != word)
            in.fail("expected '" + word + "', got '" + got + "'");
    };

    {
        std::istringstream ss(in.next());
        expect_word(ss, "rfvi-instance");
        int version = 0;
        ss >> version;
        if (version != 1)
            in.fail("unsupported instance version");
    }
    std::string name;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "name");
        ss >> name;
    }
    std::vector<Index> sizes;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "layout");
        Index j_count = 0;
        ss >> j_count;
        sizes.resize(static_cast<std::size_t>(j_count));
        for (auto& s : sizes)
            if (!(ss >> s))
                in.fail("bad layout");
    }
    BlockLayout layout(sizes);
    double mu = 0, lip = 0;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "mu");
        ss >> mu;
    }
    {
        std::istringstream ss(in.next());
        expect_word(ss, "lipschitz");
        ss >> lip;
    }
    Index n = 0;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "affine");
        ss >> n;
        if (n != layout.total())
            in.fail("affine dimension does not match layout");
    }
    Matrix a = in.read_matrix(n, n);
    {
        std::istringstream ss(in.next());
        expect_word(ss, "offset");
    }
    Vector offset = in.read_vector(n);
    std::optional<Vector> xstar;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "xstar");
        std::string tag;
        ss >> tag;
        if (tag == "present")
            xstar = in.read_vector(n);
        else if (tag != "absent")
            in.fail("bad xstar tag");
    }
    std::string initial_kind;
    {
        std::istringstream ss(in.next());
        expect_word(ss, "initial");
        ss >> initial_kind;
        if (initial_kind != "normal" && initial_kind != "uniform01")
            in.fail("unknown initial sampler '" + initial_kind + "'");
    }

    std::vector<SimpleSet> sets;
    for (Index j = 0; j < layout.agents(); ++j) {
        std::istringstream ss(in.next());
        expect_word(ss, "set");
        std::string kind;
        Index dim = 0;
        ss >> kind >> dim;
        if (kind == "fullspace") {
            sets.push_back(SimpleSet::full_space(dim));
        } else if (kind == "box") {
            Vector lo = in.read_vector(dim);
            Vector hi = in.read_vector(dim);
            sets.push_back(SimpleSet::box(lo, hi));
        } else if (kind == "ball") {
            double radius = 0;
            ss >> radius;
            sets.push_back(SimpleSet::ball(in.read_vector(dim), radius));
        } else {
            in.fail("unknown set kind '" + kind + "'");
        }
    }

    std::vector<FamilyPtr> families;
    for (Index j = 0; j < layout.agents(); ++j) {
        std::istringstream ss(in.next());
        expect_word(ss, "family");
        std::string kind;
        ss >> kind;
        if (kind == "none") {
            families.push_back(nullptr);
        } else if (kind == "quadratic") {
            Index agent = 0;
            std::size_t count = 0;
            double max_lambda = 0, box_radius = 0;
            ss >> agent >> count >> max_lambda >> box_radius;
            const Index dim = layout.size(agent);
            std::optional<Vector> witness;
            {
                std::istringstream ws(in.next());
                expect_word(ws, "witness");
                std::string tag;
                ws >> tag;
                if (tag == "present")
                    witness = in.read_vector(dim);
            }
            std::vector<Matrix> qs;
            std::vector<Vector> bs;
            std::vector<double> cs;
            for (std::size_t i = 0; i < count; ++i) {
                qs.push_back(in.read_matrix(dim, dim));
                bs.push_back(in.read_vector(dim));
                cs.push_back(in.read_vector(1)[0]);
            }
            families.push_back(std::make_shared<QuadraticConstraintFamily>(
                agent, std::move(qs), std::move(bs), std::move(cs), max_lambda, box_radius,
                witness));
        } else if (kind == "imitation") {
            Index agent = 0, dim = 0, anchor_offset = 0;
            double xi_max = 0, mg = 0;
            ss >> agent >> dim >> xi_max >> anchor_offset >> mg;
            families.push_back(std::make_shared<ImitationExplorationFamily>(
                agent, dim, xi_max, anchor_offset, mg));
        } else {
            in.fail("unknown family kind '" + kind + "'");
        }
    }

    std::function<Vector(Rng&)> initial;
    const Index total = layout.total();
    if (initial_kind == "normal") {
        initial = [total](Rng& rng) {
            std::normal_distribution<double> nd(0.0, 1.0);
            Vector x(total);
            for (Index i = 0; i < total; ++i)
                x[i] = nd(rng);
            return x;
        };
    } else {
        initial = [total](Rng& rng) {
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            Vector x(total);
            for (Index i = 0; i < total; ++i)
                x[i] = unif(rng);
            return x;
        };
    }

    ProblemInstance inst{name,
                         layout,
                         GameMapping::from_affine(std::move(a), std::move(offset), mu, lip),
                         std::move(sets),
                         std::move(families),
                         std::move(xstar),
                         std::move(initial)};
    inst.validate();
    return LoadedInstance{std::move(inst), initial_kind};
}

inline void save_instance_file(const std::string& path, const ProblemInstance& inst,
                               const std::string& initial_kind) {
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("save_instance: cannot open " + path);
    save_instance(os, inst, initial_kind);
    if (!os)
        throw std::runtime_error("save_instance: write failed for " + path);
}

inline LoadedInstance load_instance_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("load_instance: cannot open " + path);
    return load_instance(is, path);
}

}  // namespace rfvi
