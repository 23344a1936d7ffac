//! Command-line pipeline around the core library: dataset generation,
//! black-box and proxy training, the estimator benchmark, attribution
//! dumps, and debiasing — six subcommands sharing one TOML config.

pub mod commands;
pub mod config;
pub mod manifest;

use cpm_core::error::CoreError;

/// Process exit code per error category. Distinct codes let scripts react
/// without parsing stderr: 2 = the request can never work as written
/// (config/usage/shape), 3 = I/O failure, 4 = malformed file, 5 = a lookup
/// found nothing. 0 is success; 1 is reserved for internal panics.
pub fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Config(_) | CoreError::Usage(_) | CoreError::Shape(_) => 2,
        CoreError::Io(_) => 3,
        CoreError::Format(_) => 4,
        CoreError::NotFound(_) => 5,
    }
}

/// Short category tag used in stderr lines.
pub fn category(err: &CoreError) -> &'static str {
    match err {
        CoreError::Config(_) => "config",
        CoreError::Shape(_) => "shape",
        CoreError::Usage(_) => "usage",
        CoreError::NotFound(_) => "not-found",
        CoreError::Format(_) => "format",
        CoreError::Io(_) => "io",
    }
}

/// The error's message without the category prefix its `Display` carries.
pub fn message(err: &CoreError) -> String {
    match err {
        CoreError::Config(m)
        | CoreError::Shape(m)
        | CoreError::Usage(m)
        | CoreError::NotFound(m)
        | CoreError::Format(m) => m.clone(),
        CoreError::Io(e) => e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_category_maps_to_a_distinct_documented_code() {
        let errs = [
            CoreError::Config("x".into()),
            CoreError::Usage("x".into()),
            CoreError::Shape("x".into()),
            CoreError::Io(std::io::Error::other("x")),
            CoreError::Format("x".into()),
            CoreError::NotFound("x".into()),
        ];
        let codes: Vec<i32> = errs.iter().map(exit_code).collect();
        assert_eq!(codes, vec![2, 2, 2, 3, 4, 5]);
        for err in &errs {
            assert!(!message(err).is_empty());
            assert!(!category(err).is_empty());
        }
    }
}
