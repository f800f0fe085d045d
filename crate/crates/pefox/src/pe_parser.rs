//! Import-table traversal and feature extraction.
//!
//! A sample's feature set is the union of its imported DLL names and
//! imported function names, lowercased into one flat namespace. A
//! [`Vocabulary`] fixes a lexicographic order over the names seen in a
//! corpus; [`vectorize`] then turns any feature set into a binary vector
//! against that order. Unknown names are dropped, so a fixed vocabulary
//! yields fixed-width vectors for any input.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::pe_model::{ImportEntry, PeImage, SectionHeader, IMPORT_DIRECTORY_INDEX};

// ---- errors ----

/// Errors produced by RVA translation and import walking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParserError {
    /// No section maps the given RVA.
    UnmappedRva { rva: u32, context: Option<String> },
    /// Import machinery exceeded the descriptor/thunk traversal bounds,
    /// which in practice means a cycle or garbage.
    CyclicOrOverlong { what: String, limit: usize },
}

impl fmt::Display for ParserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParserError::UnmappedRva { rva, context } => match context {
                Some(c) => write!(f, "rva {rva:#x} maps to no section ({c})"),
                None => write!(f, "rva {rva:#x} maps to no section"),
            },
            ParserError::CyclicOrOverlong { what, limit } => {
                write!(f, "import walk aborted: more than {limit} {what}")
            }
        }
    }
}

impl std::error::Error for ParserError {}

/// Errors produced by the vocabulary / feature-vector file formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    BadHeader { reason: String },
    BadLine { line: usize, reason: String },
    VocabMismatch { expected: String, found: String },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadHeader { reason } => write!(f, "bad feature file header: {reason}"),
            FormatError::BadLine { line, reason } => write!(f, "bad line {line}: {reason}"),
            FormatError::VocabMismatch { expected, found } => {
                write!(f, "vocabulary hash mismatch: file wants {expected}, have {found}")
            }
        }
    }
}

impl std::error::Error for FormatError {}

// ---- rva translation ----

/// Translate an RVA to a file offset using the section table.
///
/// A section covers `[virtual_address, virtual_address + max(virtual_size,
/// size_of_raw_data))`; within it, `foa = rva - virtual_address +
/// pointer_to_raw_data`.
pub fn rva_to_foa(rva: u32, sections: &[SectionHeader]) -> Result<u32, ParserError> {
    for s in sections {
        let span = s.virtual_size.max(s.size_of_raw_data);
        if rva >= s.virtual_address && (rva - s.virtual_address) < span {
            return Ok(rva - s.virtual_address + s.pointer_to_raw_data);
        }
    }
    Err(ParserError::UnmappedRva { rva, context: None })
}

// ---- import walking ----

/// Traversal bounds for [`walk_imports_with_limits`].
#[derive(Debug, Clone, Copy)]
pub struct WalkLimits {
    pub max_descriptors: usize,
    pub max_thunks: usize,
    pub max_name_len: usize,
}

impl Default for WalkLimits {
    fn default() -> Self {
        WalkLimits { max_descriptors: 4096, max_thunks: 65536, max_name_len: 4096 }
    }
}

struct RvaReader<'a> {
    image: &'a PeImage,
}

impl<'a> RvaReader<'a> {
    fn byte(&self, rva: u32, context: &str) -> Result<u8, ParserError> {
        for s in &self.image.sections {
            let h = &s.header;
            let span = h.virtual_size.max(h.size_of_raw_data);
            if rva >= h.virtual_address && (rva - h.virtual_address) < span {
                let off = (rva - h.virtual_address) as usize;
                // Virtual-only tail (virtual_size > raw size) reads as zero,
                // matching what the loader would map.
                return Ok(s.data.get(off).copied().unwrap_or(0));
            }
        }
        Err(ParserError::UnmappedRva { rva, context: Some(context.to_string()) })
    }

    fn u32(&self, rva: u32, context: &str) -> Result<u32, ParserError> {
        let mut b = [0u8; 4];
        for (i, slot) in b.iter_mut().enumerate() {
            *slot = self.byte(rva + i as u32, context)?;
        }
        Ok(u32::from_le_bytes(b))
    }

    fn cstr(&self, rva: u32, max_len: usize, context: &str) -> Result<String, ParserError> {
        let mut out = Vec::new();
        loop {
            if out.len() > max_len {
                return Err(ParserError::CyclicOrOverlong {
                    what: format!("bytes in {context} string"),
                    limit: max_len,
                });
            }
            let b = self.byte(rva + out.len() as u32, context)?;
            if b == 0 {
                break;
            }
            out.push(b.to_ascii_lowercase());
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }
}

/// Walk the import directory with default traversal bounds.
pub fn walk_imports(image: &PeImage) -> Result<Vec<ImportEntry>, ParserError> {
    walk_imports_with_limits(image, WalkLimits::default())
}

/// Walk the import directory, collecting one [`ImportEntry`] per descriptor.
///
/// Descriptors are read until the all-zero terminator. For each one the
/// import name table is preferred; if its RVA is zero the import address
/// table is used instead. Name thunks are resolved through hint/name
/// entries; thunks with the high bit set import by ordinal and only bump
/// `by_ordinal_count`. A zero import directory RVA yields an empty list.
pub fn walk_imports_with_limits(
    image: &PeImage,
    limits: WalkLimits,
) -> Result<Vec<ImportEntry>, ParserError> {
    let dir = image.optional.data_directories[IMPORT_DIRECTORY_INDEX];
    if dir.rva == 0 {
        return Ok(Vec::new());
    }
    let r = RvaReader { image };
    let mut entries = Vec::new();
    let mut thunks_seen = 0usize;
    for i in 0.. {
        if i >= limits.max_descriptors {
            return Err(ParserError::CyclicOrOverlong {
                what: "import descriptors".into(),
                limit: limits.max_descriptors,
            });
        }
        let d = dir.rva + (i as u32) * 20;
        let ctx = format!("descriptor {i}");
        let original_first_thunk = r.u32(d, &ctx)?;
        let name_rva = r.u32(d + 12, &ctx)?;
        let first_thunk = r.u32(d + 16, &ctx)?;
        if original_first_thunk == 0 && name_rva == 0 && first_thunk == 0 {
            break;
        }
        let dll_name = r.cstr(name_rva, limits.max_name_len, &format!("descriptor {i} dll name"))?;

        let thunk_base = if original_first_thunk != 0 { original_first_thunk } else { first_thunk };
        let mut function_names = Vec::new();
        let mut by_ordinal_count = 0usize;
        for j in 0.. {
            thunks_seen += 1;
            if thunks_seen > limits.max_thunks {
                return Err(ParserError::CyclicOrOverlong {
                    what: "import thunks".into(),
                    limit: limits.max_thunks,
                });
            }
            let thunk = r.u32(thunk_base + (j as u32) * 4, &format!("descriptor {i} thunk {j}"))?;
            if thunk == 0 {
                break;
            }
            if thunk & 0x8000_0000 != 0 {
                by_ordinal_count += 1;
                continue;
            }
            // Hint/name entry: u16 hint, then the NUL-terminated name.
            let name =
                r.cstr(thunk + 2, limits.max_name_len, &format!("descriptor {i} thunk {j} name"))?;
            if !name.is_empty() {
                function_names.push(name);
            }
        }
        entries.push(ImportEntry { dll_name, function_names, by_ordinal_count });
    }
    Ok(entries)
}

// ---- features ----

/// The deduplicated, lowercased name set of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureSet {
    pub names: BTreeSet<String>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Extract the feature set of `image`: DLL names and function names pooled
/// into one namespace. Empty names never appear.
pub fn extract_features(image: &PeImage) -> Result<FeatureSet, ParserError> {
    let mut names = BTreeSet::new();
    for entry in walk_imports(image)? {
        if !entry.dll_name.is_empty() {
            names.insert(entry.dll_name);
        }
        for f in entry.function_names {
            names.insert(f);
        }
    }
    Ok(FeatureSet { names })
}

/// A fixed, lexicographically sorted feature namespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Number of names (the feature-vector width `m`).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn from_sorted(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Vocabulary { names, index }
    }

    /// The vocabulary file: one name per line, sorted, trailing newline.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for n in &self.names {
            out.push_str(n);
            out.push('\n');
        }
        out
    }

    /// Parse and validate a vocabulary document (sorted, unique, lowercase).
    pub fn from_document(text: &str) -> Result<Self, FormatError> {
        let mut names = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                return Err(FormatError::BadLine { line: lineno, reason: "empty name".into() });
            }
            if line.chars().any(|c| c.is_ascii_uppercase()) {
                return Err(FormatError::BadLine {
                    line: lineno,
                    reason: format!("name '{line}' is not lowercase"),
                });
            }
            if let Some(prev) = names.last() {
                let prev: &String = prev;
                if prev.as_str() >= line {
                    return Err(FormatError::BadLine {
                        line: lineno,
                        reason: format!("'{line}' breaks sorted unique order"),
                    });
                }
            }
            names.push(line.to_string());
        }
        Ok(Vocabulary::from_sorted(names))
    }

    /// Hex SHA-256 of the vocabulary document, used to pin feature-vector
    /// files to the vocabulary they were produced with.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_document().as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Build a vocabulary as the sorted union of the given feature sets.
pub fn build_vocabulary(sets: &[FeatureSet]) -> Vocabulary {
    let mut union = BTreeSet::new();
    for s in sets {
        union.extend(s.names.iter().cloned());
    }
    Vocabulary::from_sorted(union.into_iter().collect())
}

/// A binary feature vector over some vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    bits: Vec<u8>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i] != 0
    }

    /// Bits as 0/1 bytes, vocabulary order.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Indices of set bits, ascending.
    pub fn set_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn from_bits(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        FeatureVector { bits }
    }
}

/// Project `features` onto `vocab`: bit `i` is set iff `vocab[i]` is in the
/// set. Names outside the vocabulary are ignored.
pub fn vectorize(features: &FeatureSet, vocab: &Vocabulary) -> FeatureVector {
    let mut bits = vec![0u8; vocab.len()];
    for name in &features.names {
        if let Some(i) = vocab.index_of(name) {
            bits[i] = 1;
        }
    }
    FeatureVector { bits }
}

// ---- feature-vector file format ----

const FEATURE_FILE_MAGIC: &str = "MFOXFV";
const FEATURE_FILE_VERSION: &str = "1";

/// Serialize labeled feature vectors:
///
/// ```text
/// MFOXFV 1 <vocab-hash> <width>
/// <sample-id> <idx> <idx> ...
/// ```
///
/// Sample ids must not contain whitespace. Indices are the set bits,
/// ascending; a sample with no set bits is just its id.
pub fn write_feature_vectors(
    vocab: &Vocabulary,
    samples: &[(String, FeatureVector)],
) -> Result<String, FormatError> {
    let mut out = format!(
        "{FEATURE_FILE_MAGIC} {FEATURE_FILE_VERSION} {} {}\n",
        vocab.content_hash(),
        vocab.len()
    );
    for (id, fv) in samples {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(FormatError::BadLine {
                line: 0,
                reason: format!("sample id '{id}' is empty or contains whitespace"),
            });
        }
        if fv.len() != vocab.len() {
            return Err(FormatError::BadLine {
                line: 0,
                reason: format!("vector width {} != vocabulary width {}", fv.len(), vocab.len()),
            });
        }
        out.push_str(id);
        for i in fv.set_indices() {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse a feature-vector document against `vocab`, validating the embedded
/// vocabulary hash and width.
pub fn read_feature_vectors(
    text: &str,
    vocab: &Vocabulary,
) -> Result<Vec<(String, FeatureVector)>, FormatError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(FormatError::BadHeader { reason: "empty document".into() })?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != FEATURE_FILE_MAGIC || fields[1] != FEATURE_FILE_VERSION {
        return Err(FormatError::BadHeader {
            reason: format!("expected '{FEATURE_FILE_MAGIC} {FEATURE_FILE_VERSION} <hash> <width>', got '{header}'"),
        });
    }
    let have = vocab.content_hash();
    if fields[2] != have {
        return Err(FormatError::VocabMismatch { expected: fields[2].to_string(), found: have });
    }
    let width: usize = fields[3]
        .parse()
        .map_err(|_| FormatError::BadHeader { reason: "width is not an integer".into() })?;
    if width != vocab.len() {
        return Err(FormatError::BadHeader {
            reason: format!("width {width} != vocabulary width {}", vocab.len()),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let id = parts.next().unwrap().to_string();
        let mut bits = vec![0u8; width];
        let mut prev: Option<usize> = None;
        for p in parts {
            let i: usize = p.parse().map_err(|_| FormatError::BadLine {
                line: lineno,
                reason: format!("index '{p}' is not an integer"),
            })?;
            if i >= width {
                return Err(FormatError::BadLine {
                    line: lineno,
                    reason: format!("index {i} out of range for width {width}"),
                });
            }
            if let Some(pv) = prev {
                if i <= pv {
                    return Err(FormatError::BadLine {
                        line: lineno,
                        reason: "indices must be strictly ascending".into(),
                    });
                }
            }
            prev = Some(i);
            bits[i] = 1;
        }
        out.push((id, FeatureVector { bits }));
    }
    Ok(out)
}

// ---- tests ----

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe_model::{
        parse_pe, serialize_pe, synthesize_min_pe, FixtureSpec, ImportSpec, SectionHeader,
    };

    fn header(va: u32, vsize: u32, raw: u32, ptr: u32) -> SectionHeader {
        SectionHeader {
            name: *b".sect\0\0\0",
            virtual_size: vsize,
            virtual_address: va,
            size_of_raw_data: raw,
            pointer_to_raw_data: ptr,
            pointer_to_relocations: 0,
            pointer_to_linenumbers: 0,
            number_of_relocations: 0,
            number_of_linenumbers: 0,
            characteristics: 0,
        }
    }

    #[test]
    fn rva_translation_matches_hand_arithmetic() {
        // Section at RVA 0x1000, raw pointer 0x400: 0x1010 -> 0x410.
        let sections = [header(0x1000, 0x800, 0x800, 0x400)];
        assert_eq!(rva_to_foa(0x1010, &sections).unwrap(), 0x410);
        assert_eq!(rva_to_foa(0x1000, &sections).unwrap(), 0x400);
    }

    #[test]
    fn rva_outside_every_section_is_unmapped() {
        let sections = [header(0x1000, 0x200, 0x200, 0x400)];
        match rva_to_foa(0x3000, &sections).unwrap_err() {
            ParserError::UnmappedRva { rva: 0x3000, .. } => {}
            other => panic!("expected UnmappedRva, got {other}"),
        }
        // One past the end of the span is already outside.
        assert!(rva_to_foa(0x1200, &sections).is_err());
    }

    #[test]
    fn span_uses_larger_of_virtual_and_raw_size() {
        let sections = [header(0x1000, 0x1800, 0x200, 0x400)];
        assert_eq!(rva_to_foa(0x1700, &sections).unwrap(), 0xB00);
    }

    fn fixture() -> PeImage {
        let spec = FixtureSpec {
            imports: vec![
                ImportSpec {
                    dll: "kernel32.dll".into(),
                    functions: vec!["exitprocess".into(), "writefile".into()],
                    ordinals: vec![],
                },
                ImportSpec {
                    dll: "user32.dll".into(),
                    functions: vec!["messageboxa".into()],
                    ordinals: vec![1],
                },
            ],
            ..FixtureSpec::default()
        };
        parse_pe(&synthesize_min_pe(&spec).unwrap()).unwrap()
    }

    #[test]
    fn walk_imports_sees_every_descriptor() {
        let entries = walk_imports(&fixture()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].dll_name, "kernel32.dll");
        assert_eq!(entries[0].function_names, vec!["exitprocess", "writefile"]);
        assert_eq!(entries[0].by_ordinal_count, 0);
        assert_eq!(entries[1].dll_name, "user32.dll");
        assert_eq!(entries[1].function_names, vec!["messageboxa"]);
        assert_eq!(entries[1].by_ordinal_count, 1);
    }

    #[test]
    fn ordinal_only_imports_add_no_names() {
        let spec = FixtureSpec {
            imports: vec![ImportSpec {
                dll: "ws2_32.dll".into(),
                functions: vec![],
                ordinals: vec![1, 2, 3],
            }],
            ..FixtureSpec::default()
        };
        let image = parse_pe(&synthesize_min_pe(&spec).unwrap()).unwrap();
        let entries = walk_imports(&image).unwrap();
        assert_eq!(entries.len(), 1);
        assert!(entries[0].function_names.is_empty());
        assert_eq!(entries[0].by_ordinal_count, 3);
        let features = extract_features(&image).unwrap();
        assert_eq!(features.names.iter().collect::<Vec<_>>(), vec!["ws2_32.dll"]);
    }

    #[test]
    fn zero_import_directory_yields_no_entries() {
        let image =
            parse_pe(&synthesize_min_pe(&FixtureSpec::default()).unwrap()).unwrap();
        assert!(walk_imports(&image).unwrap().is_empty());
        assert!(extract_features(&image).unwrap().is_empty());
    }

    #[test]
    fn walk_imports_survives_a_round_trip() {
        let image = fixture();
        let again = parse_pe(&serialize_pe(&image).unwrap()).unwrap();
        assert_eq!(walk_imports(&image).unwrap(), walk_imports(&again).unwrap());
    }

    #[test]
    fn descriptor_bound_trips_cyclic_error() {
        let mut image = fixture();
        // Point the import directory at the code section: 0x55 0x8B ... never
        // presents an all-zero descriptor, so the walk must hit its bound.
        image.optional.data_directories[IMPORT_DIRECTORY_INDEX].rva =
            image.sections[0].header.virtual_address;
        let limits = WalkLimits { max_descriptors: 8, max_thunks: 64, max_name_len: 64 };
        match walk_imports_with_limits(&image, limits) {
            Err(ParserError::CyclicOrOverlong { .. }) | Err(ParserError::UnmappedRva { .. }) => {}
            other => panic!("expected traversal failure, got {other:?}"),
        }
    }

    #[test]
    fn features_deduplicate_across_dlls() {
        let spec = FixtureSpec {
            imports: vec![
                ImportSpec {
                    dll: "a.dll".into(),
                    functions: vec!["shared".into()],
                    ordinals: vec![],
                },
                ImportSpec {
                    dll: "b.dll".into(),
                    functions: vec!["shared".into()],
                    ordinals: vec![],
                },
            ],
            ..FixtureSpec::default()
        };
        let image = parse_pe(&synthesize_min_pe(&spec).unwrap()).unwrap();
        let f = extract_features(&image).unwrap();
        assert_eq!(
            f.names.iter().collect::<Vec<_>>(),
            vec!["a.dll", "b.dll", "shared"]
        );
    }

    fn set(names: &[&str]) -> FeatureSet {
        FeatureSet { names: names.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn vocabulary_is_sorted_union() {
        let v = build_vocabulary(&[set(&["b.dll", "writefile"]), set(&["a.dll", "writefile"])]);
        assert_eq!(v.names(), &["a.dll", "b.dll", "writefile"]);
        assert_eq!(v.index_of("writefile"), Some(2));
    }

    #[test]
    fn empty_sets_make_an_empty_vocabulary() {
        assert!(build_vocabulary(&[FeatureSet::default()]).is_empty());
        assert!(build_vocabulary(&[]).is_empty());
    }

    #[test]
    fn vectorize_projects_onto_vocabulary() {
        let vocab = build_vocabulary(&[set(&["a.dll", "b.dll", "c"])]);
        let fv = vectorize(&set(&["b.dll", "zznotinvocab"]), &vocab);
        assert_eq!(fv.bits(), &[0, 1, 0]);
        // A sample vectorized against its own vocabulary is all ones.
        let own = set(&["a.dll", "b.dll", "c"]);
        assert_eq!(vectorize(&own, &vocab).count_ones(), 3);
        // Empty vocabulary: zero-length vector.
        assert_eq!(vectorize(&own, &build_vocabulary(&[])).len(), 0);
    }

    #[test]
    fn adding_a_known_name_never_clears_bits() {
        // Monotonicity: growing the feature set can only set more bits.
        let vocab = build_vocabulary(&[set(&["a", "b", "c", "d", "e"])]);
        let mut names: Vec<&str> = vec!["b"];
        let mut prev = vectorize(&set(&names), &vocab);
        for add in ["d", "a", "e", "c"] {
            names.push(add);
            let next = vectorize(&set(&names), &vocab);
            for i in 0..vocab.len() {
                assert!(!prev.get(i) || next.get(i), "bit {i} was cleared");
            }
            prev = next;
        }
    }

    #[test]
    fn vocabulary_document_round_trips() {
        let v = build_vocabulary(&[set(&["a.dll", "exitprocess", "writefile"])]);
        let doc = v.to_document();
        assert_eq!(doc, "a.dll\nexitprocess\nwritefile\n");
        assert_eq!(Vocabulary::from_document(&doc).unwrap(), v);
    }

    #[test]
    fn vocabulary_document_rejects_disorder_and_case() {
        assert!(Vocabulary::from_document("b\na\n").is_err());
        assert!(Vocabulary::from_document("a\na\n").is_err());
        assert!(Vocabulary::from_document("A\nb\n").is_err());
    }

    #[test]
    fn feature_vector_file_round_trips() {
        let vocab = build_vocabulary(&[set(&["a", "b", "c", "d"])]);
        let samples = vec![
            ("s1".to_string(), vectorize(&set(&["a", "c"]), &vocab)),
            ("s2".to_string(), vectorize(&set(&[]), &vocab)),
        ];
        let doc = write_feature_vectors(&vocab, &samples).unwrap();
        let first = doc.lines().next().unwrap();
        assert!(first.starts_with("MFOXFV 1 "));
        assert!(first.ends_with(" 4"));
        assert_eq!(doc.lines().nth(1).unwrap(), "s1 0 2");
        assert_eq!(doc.lines().nth(2).unwrap(), "s2");
        assert_eq!(read_feature_vectors(&doc, &vocab).unwrap(), samples);
    }

    #[test]
    fn feature_vector_file_pins_its_vocabulary() {
        let vocab = build_vocabulary(&[set(&["a", "b"])]);
        let other = build_vocabulary(&[set(&["a", "z"])]);
        let doc = write_feature_vectors(&vocab, &[]).unwrap();
        assert!(matches!(
            read_feature_vectors(&doc, &other).unwrap_err(),
            FormatError::VocabMismatch { .. }
        ));
    }

    #[test]
    fn feature_vector_file_rejects_bad_indices() {
        let vocab = build_vocabulary(&[set(&["a", "b"])]);
        let doc = write_feature_vectors(&vocab, &[]).unwrap() + "s1 5\n";
        assert!(read_feature_vectors(&doc, &vocab).is_err());
        let doc2 = write_feature_vectors(&vocab, &[]).unwrap() + "s1 1 0\n";
        assert!(read_feature_vectors(&doc2, &vocab).is_err());
    }

    #[test]
    fn whitespace_sample_ids_are_rejected() {
        let vocab = build_vocabulary(&[set(&["a"])]);
        let fv = vectorize(&set(&["a"]), &vocab);
        assert!(write_feature_vectors(&vocab, &[("bad id".into(), fv)]).is_err());
    }
}
