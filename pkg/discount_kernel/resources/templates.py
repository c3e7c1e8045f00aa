class MessageTemplates:
    """Centralized command-line messages"""

    DESCRIPTION = """Arbitrage-free discount curves from coupon-bond prices.

Typical pipeline:
  synthesize -> ingest -> fit -> reduce -> simulate
  crossval / sensitivity / compare-naive work on an ingested systems bundle"""

    INGESTED = "📥 Ingested {quotes} quotes over {days} days ({rejects} rejected) -> {out}"
    SYNTHESIZED = "🧪 Wrote {quotes} synthetic quotes over {days} days -> {out}"
    FITTED = "📈 Fitted {fitted} of {days} days, average yield RMSE {rmse:.6f} -> {out}"
    FIT_FAILURES = "⚠️ {count} days could not be fitted, see {path}"
    CROSSVAL = "🔎 Best alpha={alpha}, beta={beta}, ridge={ridge} (score {score:.6e}) -> {out}"
    INVALID_GRID = "⚠️ Ignored grid entries:\n{entries}"
    REDUCED = "🧮 d={d}: loss {loss:.6e}, average yield RMSE {rmse:.6f}{flag}"
    NOT_CONVERGED = " (rate search did not converge)"
    SIMULATED = "🎲 Simulated {paths} paths over {horizon}y, {exploded} exploded; martingale check {status} -> {out}"
    COMPARED = "⚖️ Kernel RMSE {kernel:.6f} in {kernel_s:.2f}s, naive RMSE {naive:.6f} in {naive_s:.2f}s -> {out}"
    SENSITIVITY = "🌡️ Sensitivity grid with {cells} cells -> {out}"

    # Error messages
    INPUT_ERROR = "❌ Input error: {error}"
    STRICT_FAILURE = "❌ {count} days failed to fit and --strict is set"
    DIAGNOSTIC_INVALID = "❌ {error}"
    MISSING_INPUT = "{flag} is required for {command}"
    NO_MODEL = "no reduced model with d={d} in {path}"
