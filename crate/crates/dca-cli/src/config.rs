//! Shared plumbing for the binary: failure classes, the flat configuration
//! file, flag/file/default resolution with a config echo, and small artifact
//! helpers.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dca_metric::{read_csv_dataset, read_embeddings, Dataset, DcaError};

/// Failure classes the binary maps to exit codes.
///
/// `User` covers everything the invoker can fix — configuration, I/O,
/// validation, and numeric problems — and exits 1 with a single-line
/// diagnostic. `Internal` marks a broken invariant inside the toolkit itself
/// and exits 2.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError::User(message.into())
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError::Internal(message.into())
    }
}

impl From<DcaError> for CliError {
    fn from(err: DcaError) -> Self {
        CliError::User(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::User(err.to_string())
    }
}

/// Every key a configuration file may set. Flags use the same names (with
/// dashes instead of underscores) and always win over the file.
pub const ALLOWED_KEYS: &[&str] = &[
    "data",
    "dims",
    "history",
    "identities",
    "input_dim",
    "k",
    "lambda",
    "loss",
    "lr",
    "margin",
    "mode",
    "model",
    "noise_sigma",
    "out",
    "p",
    "queries_per_id",
    "samples",
    "seed",
    "separation",
    "steps",
    "threshold",
];

/// A flat `key = value` configuration file: one assignment per line, blank
/// lines and `#` comments ignored. Unknown and repeated keys are rejected so
/// a typo cannot silently fall back to a default.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|err| {
            CliError::user(format!("cannot read config file {}: {err}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (index, raw_line) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::user(format!(
                    "config file {} line {line_no}: expected 'key = value', got '{line}'",
                    path.display()
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !ALLOWED_KEYS.contains(&key) {
                return Err(CliError::user(format!(
                    "config file {} line {line_no}: unknown key '{key}'",
                    path.display()
                )));
            }
            if values.insert(key.to_owned(), value.to_owned()).is_some() {
                return Err(CliError::user(format!(
                    "config file {} line {line_no}: key '{key}' set twice",
                    path.display()
                )));
            }
        }
        Ok(FileConfig { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves each setting as flag, else file, else default, and records the
/// outcome in order so every artifact can echo the fully resolved
/// configuration it was produced under.
pub struct Resolver<'a> {
    file: &'a FileConfig,
    echo: Vec<(String, String)>,
}

impl<'a> Resolver<'a> {
    pub fn new(command: &str, file: &'a FileConfig) -> Self {
        Resolver {
            file,
            echo: vec![("command".to_owned(), command.to_owned())],
        }
    }

    fn parse<T>(&self, key: &str, raw: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        raw.parse()
            .map_err(|err| CliError::user(format!("invalid value '{raw}' for '{key}': {err}")))
    }

    /// A setting with a default.
    pub fn value<T>(&mut self, flag: &Option<String>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let resolved = match flag.as_deref().or_else(|| self.file.raw(key)) {
            Some(raw) => self.parse(key, raw.trim())?,
            None => default,
        };
        self.echo.push((key.to_owned(), resolved.to_string()));
        Ok(resolved)
    }

    /// A path the command cannot run without.
    pub fn path_required(&mut self, flag: &Option<String>, key: &str) -> Result<PathBuf, CliError> {
        match flag.as_deref().or_else(|| self.file.raw(key)) {
            Some(raw) => {
                let path = PathBuf::from(raw.trim());
                self.echo.push((key.to_owned(), path.display().to_string()));
                Ok(path)
            }
            None => Err(CliError::user(format!(
                "missing required setting '{key}' (pass --{} or set it in the config file)",
                key.replace('_', "-")
            ))),
        }
    }

    /// A path with a derived default.
    pub fn path_value(&mut self, flag: &Option<String>, key: &str, default: PathBuf) -> PathBuf {
        let path = match flag.as_deref().or_else(|| self.file.raw(key)) {
            Some(raw) => PathBuf::from(raw.trim()),
            None => default,
        };
        self.echo.push((key.to_owned(), path.display().to_string()));
        path
    }

    /// Records a value the command fixes itself rather than resolves.
    pub fn fixed(&mut self, key: &str, value: impl Display) {
        self.echo.push((key.to_owned(), value.to_string()));
    }

    pub fn echo(&self) -> &[(String, String)] {
        &self.echo
    }
}

/// Hidden and output layer widths, e.g. `32,16` for one hidden layer of 32
/// units feeding a 16-dimensional embedding. The input width comes from the
/// dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let widths = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                match part.parse::<usize>() {
                    Ok(0) => Err("widths must be positive".to_owned()),
                    Ok(width) => Ok(width),
                    Err(_) => Err(format!("'{part}' is not a layer width")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dims(widths))
    }
}

impl Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for width in &self.0 {
            if !first {
                f.write_str(",")?;
            }
            write!(f, "{width}")?;
            first = false;
        }
        Ok(())
    }
}

/// Renders the config echo as `# key = value` lines, the form embedded at
/// the top of every CSV artifact and in every binary artifact's sidecar.
pub fn echo_lines(echo: &[(String, String)]) -> String {
    let mut out = String::new();
    for (key, value) in echo {
        out.push_str("# ");
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(value);
        out.push('\n');
    }
    out
}

/// Writes the resolved-config sidecar (`<artifact>.meta`) next to a binary
/// artifact, so files in pinned formats still carry their provenance.
pub fn write_meta(artifact: &Path, echo: &[(String, String)]) -> Result<(), CliError> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta");
    fs::write(PathBuf::from(name), echo_lines(echo))?;
    Ok(())
}

/// Reads a dataset by extension: `.csv` as labeled text, anything else as
/// the binary embeddings format.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let result = if path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"))
    {
        read_csv_dataset(path)
    } else {
        read_embeddings(path)
    };
    result.map_err(|err| CliError::user(format!("cannot read dataset {}: {err}", path.display())))
}
