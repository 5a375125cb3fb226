//! Holds the `acceptance` test target, which prints one PASS/FAIL line per
//! acceptance criterion. It lives in its own package so it runs after every
//! other suite in `cargo test --workspace`.
