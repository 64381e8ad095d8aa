#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

// Shared vocabulary: block-structured vectors, evaluatable game mappings,
// simple projectable sets, and families of sampled convex constraints.

namespace rfvi {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
};

inline double positive_part(double g) { return g > 0.0 ? g : 0.0; }

// Partition of R^n into J agent blocks of sizes n_1,...,n_J.
class BlockLayout {
  public:
    explicit BlockLayout(std::vector<Index> sizes) : sizes_(std::move(sizes)) {
        if (sizes_.empty())
            throw std::invalid_argument("BlockLayout: need at least one block");
        offsets_.reserve(sizes_.size());
        total_ = 0;
        for (Index s : sizes_) {
            if (s < 1)
                throw std::invalid_argument("BlockLayout: block sizes must be positive");
            offsets_.push_back(total_);
            total_ += s;
        }
    }

    Index agents() const { return static_cast<Index>(sizes_.size()); }
    Index total() const { return total_; }
    Index size(Index j) const { return sizes_.at(static_cast<std::size_t>(j)); }
    Index offset(Index j) const { return offsets_.at(static_cast<std::size_t>(j)); }

    bool operator==(const BlockLayout& other) const = default;

  private:
    std::vector<Index> sizes_;
    std::vector<Index> offsets_;
    Index total_ = 0;
};

// A point x = (x_1,...,x_J) with its block structure.
struct JointDecision {
    BlockLayout layout;
    Vector values;

    JointDecision(BlockLayout l, Vector v) : layout(std::move(l)), values(std::move(v)) {
        if (values.size() != layout.total())
            throw std::invalid_argument("JointDecision: value length does not match layout");
    }

    auto block(Index j) { return values.segment(layout.offset(j), layout.size(j)); }
    auto block(Index j) const { return values.segment(layout.offset(j), layout.size(j)); }
};

// A set Y_j with cheap exact Euclidean projection: full space, box, or ball.
class SimpleSet {
  public:
    enum class Kind { FullSpace, Box, Ball };

    static SimpleSet full_space(Index dim) {
        SimpleSet s;
        s.kind_ = Kind::FullSpace;
        s.dim_ = dim;
        return s;
    }

    static SimpleSet box(Vector lower, Vector upper) {
        if (lower.size() != upper.size())
            throw std::invalid_argument("SimpleSet::box: bound length mismatch");
        if ((lower.array() > upper.array()).any())
            throw std::invalid_argument("SimpleSet::box: lower must be <= upper");
        SimpleSet s;
        s.kind_ = Kind::Box;
        s.dim_ = lower.size();
        s.lower_ = std::move(lower);
        s.upper_ = std::move(upper);
        return s;
    }

    static SimpleSet ball(Vector center, double radius) {
        if (radius < 0.0)
            throw std::invalid_argument("SimpleSet::ball: radius must be >= 0");
        SimpleSet s;
        s.kind_ = Kind::Ball;
        s.dim_ = center.size();
        s.center_ = std::move(center);
        s.radius_ = radius;
        return s;
    }

    Kind kind() const { return kind_; }
    Index dimension() const { return dim_; }
    const Vector& lower() const { return lower_; }
    const Vector& upper() const { return upper_; }
    const Vector& center() const { return center_; }
    double radius() const { return radius_; }

    Vector project(const Vector& v) const {
        if (v.size() != dim_)
            throw std::invalid_argument("SimpleSet::project: dimension mismatch");
        switch (kind_) {
        case Kind::FullSpace:
            return v;
        case Kind::Box:
            return v.cwiseMax(lower_).cwiseMin(upper_);
        case Kind::Ball: {
            // Rescale until membership holds so the projection is exactly
            // idempotent in floating point; almost always a single pass.
            Vector w = v;
            for (int pass = 0; pass < 100; ++pass) {
                Vector d = w - center_;
                const double n2 = d.squaredNorm();
                if (n2 <= radius_ * radius_)
                    return w;
                const double scale = radius_ / std::sqrt(n2);
                if (scale >= 1.0)
                    return w;
                Vector next = center_ + scale * d;
                if (next == w)
                    return w;
                w = std::move(next);
            }
            return w;
        }
        }
        throw std::logic_error("SimpleSet: unreachable");
    }

    bool contains(const Vector& v, double tol = 0.0) const {
        if (v.size() != dim_)
            return false;
        switch (kind_) {
        case Kind::FullSpace:
            return true;
        case Kind::Box:
            return ((v - lower_).array() >= -tol).all() && ((upper_ - v).array() >= -tol).all();
        case Kind::Ball:
            return (v - center_).norm() <= radius_ + tol;
        }
        return false;
    }

    // Exact Euclidean distance to the set.
    double distance(const Vector& v) const { return (v - project(v)).norm(); }

  private:
    SimpleSet() = default;
    Kind kind_ = Kind::FullSpace;
    Index dim_ = 0;
    Vector lower_, upper_, center_;
    double radius_ = 0.0;
};

struct AffineMap {
    Matrix matrix;  // A_F, n x n
    Vector offset;  // r, so F(x) = A_F x + r
};

// Mapping F: Y -> R^n with declared strong-monotonicity and Lipschitz constants.
struct GameMapping {
    std::function<Vector(const Vector&)> eval;
    double mu = 0.0;
    double lipschitz = 0.0;
    std::optional<AffineMap> affine;

    GameMapping(std::function<Vector(const Vector&)> f, double mu_in, double lip_in,
                std::optional<AffineMap> aff = std::nullopt)
        : eval(std::move(f)), mu(mu_in), lipschitz(lip_in), affine(std::move(aff)) {
        if (!(mu > 0.0) || !(lipschitz > 0.0))
            throw std::invalid_argument("GameMapping: mu and lipschitz must be positive");
        if (mu > lipschitz)
            throw std::invalid_argument("GameMapping: mu must not exceed lipschitz");
    }

    static GameMapping from_affine(Matrix a, Vector r, double mu_in, double lip_in) {
        auto am = std::make_shared<AffineMap>(AffineMap{std::move(a), std::move(r)});
        auto f = [am](const Vector& x) -> Vector { return am->matrix * x + am->offset; };
        return GameMapping(std::move(f), mu_in, lip_in, AffineMap{am->matrix, am->offset});
    }

    double condition_number() const { return lipschitz / mu; }

    Vector operator()(const JointDecision& x) const { return eval(x.values); }
};

// Opaque constraint identity returned by ConstraintFamily::sample. The matrix
// game uses an index into pre-generated data; the imitation game a realization
// of the exploration parameter.
using ConstraintHandle = std::variant<std::uint64_t, double>;

// Per-agent sampler of convex constraints g_a (value + subgradient).
//
// `context` carries the full joint iterate so constraints may be coupled to
// the other agents' latest blocks (the imitation game freezes agent 1 there);
// uncoupled families ignore it and accept an empty vector. Sampling is i.i.d.;
// distributions conditioned on past samples would need a stateful interface.
// All evaluation methods are pure functions of their inputs, so one family may
// serve concurrent trial runners.
class ConstraintFamily {
  public:
    virtual ~ConstraintFamily() = default;

    virtual Index agent() const = 0;
    virtual Index dimension() const = 0;
    virtual ConstraintHandle sample(Rng& rng) const = 0;
    virtual double value(const ConstraintHandle& h, const Vector& x, const Vector& context) const = 0;
    // Subgradient of g^+ at x; a fixed nonzero fallback (first basis vector)
    // when g^+(x) = 0, where any d != 0 yields a zero step.
    virtual Vector subgradient(const ConstraintHandle& h, const Vector& x, const Vector& context) const = 0;
    virtual double mg_bound() const = 0;
    virtual double regularity_c() const = 0;
    virtual bool regularity_is_nominal() const { return false; }

    // Exact dist(x_j, S_j) when analytically available.
    virtual std::optional<double> set_distance(const Vector& /*x*/, const Vector& /*context*/) const {
        return std::nullopt;
    }
    // A known point of S_j, used as the witness in residual audits.
    virtual std::optional<Vector> feasible_witness(const Vector& /*context*/) const { return std::nullopt; }
    // max_a g_a^+(x) for finite families (infeasibility proxy, not a distance).
    virtual std::optional<double> max_violation(const Vector& /*x*/, const Vector& /*context*/) const {
        return std::nullopt;
    }
    // Recomputed subgradient bound when iterates stay inside radius R (diagnostic).
    virtual std::optional<double> mg_bound_within(double /*radius*/) const { return std::nullopt; }

  protected:
    static Vector fallback_direction(Index dim) {
        Vector d = Vector::Zero(dim);
        d[0] = 1.0;
        return d;
    }
};

using FamilyPtr = std::shared_ptr<const ConstraintFamily>;

// Problem bundle consumed by the outer methods: mapping, per-agent simple sets,
// per-agent constraint families (null = no functional constraints), and the
// known solution when available.
struct ProblemInstance {
    std::string name;
    BlockLayout layout;
    GameMapping mapping;
    std::vector<SimpleSet> sets;
    std::vector<FamilyPtr> families;
    std::optional<Vector> xstar;
    std::function<Vector(Rng&)> sample_initial;

    void validate() const {
        const Index j_count = layout.agents();
        if (static_cast<Index>(sets.size()) != j_count)
            throw std::invalid_argument("ProblemInstance: one SimpleSet per agent required");
        if (static_cast<Index>(families.size()) != j_count)
            throw std::invalid_argument("ProblemInstance: one family slot per agent required");
        for (Index j = 0; j < j_count; ++j) {
            if (sets[static_cast<std::size_t>(j)].dimension() != layout.size(j))
                throw std::invalid_argument("ProblemInstance: set dimension mismatch at agent " +
                                            std::to_string(j));
            const auto& fam = families[static_cast<std::size_t>(j)];
            if (fam && fam->dimension() != layout.size(j))
                throw std::invalid_argument("ProblemInstance: family dimension mismatch at agent " +
                                            std::to_string(j));
        }
        if (xstar && xstar->size() != layout.total())
            throw std::invalid_argument("ProblemInstance: xstar length mismatch");
    }
};

// Blockwise projection onto Y = Y_1 x ... x Y_J.
inline JointDecision block_project(const std::vector<SimpleSet>& sets, const JointDecision& v) {
    if (static_cast<Index>(sets.size()) != v.layout.agents())
        throw std::invalid_argument("block_project: one set per agent block required");
    JointDecision out = v;
    for (Index j = 0; j < v.layout.agents(); ++j) {
        if (sets[static_cast<std::size_t>(j)].dimension() != v.layout.size(j))
            throw std::invalid_argument("block_project: set dimension mismatch at agent " +
                                        std::to_string(j));
        out.block(j) = sets[static_cast<std::size_t>(j)].project(v.block(j));
    }
    return out;
}

// In-place variant on raw joint values (hot path of the outer methods).
inline void block_project_inplace(const std::vector<SimpleSet>& sets, const BlockLayout& layout,
                                  Vector& v) {
    for (Index j = 0; j < layout.agents(); ++j) {
        auto seg = v.segment(layout.offset(j), layout.size(j));
        seg = sets[static_cast<std::size_t>(j)].project(seg);
    }
}

}  // namespace rfvi
