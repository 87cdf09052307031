//! C ABI for loading a trained checkpoint and linking entities in
//! tokenized text. Handles are opaque; every function returns a status
//! code and writes results through out-parameters. See include/tokel.h.

use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::os::raw::{c_char, c_double, c_int};
use std::path::Path;
use std::ptr;

use tokel::corpus::EntityVocabulary;
use tokel::fragmenter::TokenVocabulary;
use tokel::model::{encode, load_checkpoint, predict, score_entities, Checkpoint};

pub const TOKEL_OK: c_int = 0;
pub const TOKEL_ERR_NULL_ARGUMENT: c_int = 1;
pub const TOKEL_ERR_INVALID_UTF8: c_int = 2;
pub const TOKEL_ERR_LOAD: c_int = 3;
pub const TOKEL_ERR_PREDICT: c_int = 4;
pub const TOKEL_ERR_BAD_THRESHOLD: c_int = 5;

/// An opaque loaded model: checkpoint plus the vocabularies it was
/// trained with.
pub struct TokelModel {
    checkpoint: Checkpoint,
    token_vocab: TokenVocabulary,
    entity_vocab: EntityVocabulary,
    /// NUL-terminated copies of entity names handed out through
    /// predictions; freed with the handle.
    interned: BTreeMap<String, CString>,
    last_error: Option<CString>,
}

impl TokelModel {
    fn intern(&mut self, name: &str) -> *const c_char {
        self.interned
            .entry(name.to_string())
            .or_insert_with(|| CString::new(name.replace('\0', "?")).unwrap())
            .as_ptr()
    }
}

/// One token's linking decision. `entity` is NULL when the token is not
/// linked; otherwise it borrows from the model and stays valid until
/// `tokel_model_free`.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct TokelPrediction {
    pub entity: *const c_char,
    pub probability: c_double,
}

fn set_error(model: &mut TokelModel, msg: String) {
    model.last_error = CString::new(msg.replace('\0', "?")).ok();
}

unsafe fn read_path<'a>(ptr: *const c_char) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        return Err(TOKEL_ERR_NULL_ARGUMENT);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|_| TOKEL_ERR_INVALID_UTF8)
}

/// Loads a model. `checkpoint`, `token_vocab` and `entity_vocab` are
/// paths to the artifacts produced by training. On success writes a
/// handle to `out` and returns TOKEL_OK; the handle must be released with
/// `tokel_model_free`.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings (or null,
/// which is reported as an error), and `out` must point to writable
/// memory.
#[no_mangle]
pub unsafe extern "C" fn tokel_model_load(
    checkpoint: *const c_char,
    token_vocab: *const c_char,
    entity_vocab: *const c_char,
    out: *mut *mut TokelModel,
) -> c_int {
    if out.is_null() {
        return TOKEL_ERR_NULL_ARGUMENT;
    }
    *out = ptr::null_mut();
    let ckpt_path = match read_path(checkpoint) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let tv_path = match read_path(token_vocab) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let ev_path = match read_path(entity_vocab) {
        Ok(p) => p,
        Err(code) => return code,
    };

    let result = (|| -> tokel::error::Result<TokelModel> {
        let checkpoint = load_checkpoint(ckpt_path)?;
        let token_vocab = TokenVocabulary::read_from(std::io::BufReader::new(
            std::fs::File::open(tv_path)?,
        ))?;
        let entity_vocab = EntityVocabulary::read_from(std::io::BufReader::new(
            std::fs::File::open(ev_path)?,
        ))?;
        checkpoint.validate_hashes(&token_vocab.content_hash(), &entity_vocab.content_hash())?;
        Ok(TokelModel {
            checkpoint,
            token_vocab,
            entity_vocab,
            interned: BTreeMap::new(),
            last_error: None,
        })
    })();
    match result {
        Ok(model) => {
            *out = Box::into_raw(Box::new(model));
            TOKEL_OK
        }
        Err(_) => TOKEL_ERR_LOAD,
    }
}

/// Links entities in `n_tokens` whitespace-free tokens. Writes one
/// `TokelPrediction` per token into `out`, which must have room for
/// `n_tokens` entries. `threshold` is the sigmoid decision threshold in
/// [0, 1]. Unknown tokens are scored through the unknown-token embedding.
///
/// # Safety
/// `model` must come from `tokel_model_load` and not be freed; `tokens`
/// must point to `n_tokens` valid NUL-terminated strings; `out` must
/// point to at least `n_tokens` writable `TokelPrediction` slots.
#[no_mangle]
pub unsafe extern "C" fn tokel_predict(
    model: *mut TokelModel,
    tokens: *const *const c_char,
    n_tokens: usize,
    threshold: c_double,
    out: *mut TokelPrediction,
) -> c_int {
    if model.is_null() {
        return TOKEL_ERR_NULL_ARGUMENT;
    }
    let model = &mut *model;
    if n_tokens == 0 {
        return TOKEL_OK;
    }
    if tokens.is_null() || out.is_null() {
        set_error(model, "null tokens or output buffer".into());
        return TOKEL_ERR_NULL_ARGUMENT;
    }
    if !(0.0..=1.0).contains(&threshold) {
        set_error(model, format!("threshold {threshold} outside [0, 1]"));
        return TOKEL_ERR_BAD_THRESHOLD;
    }

    let mut token_ids = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let tok_ptr = *tokens.add(i);
        if tok_ptr.is_null() {
            set_error(model, format!("token {i} is null"));
            return TOKEL_ERR_NULL_ARGUMENT;
        }
        let tok = match CStr::from_ptr(tok_ptr).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error(model, format!("token {i} is not valid UTF-8"));
                return TOKEL_ERR_INVALID_UTF8;
            }
        };
        token_ids.push(model.token_vocab.id_of(&tok.to_lowercase()));
    }

    let result = (|| -> tokel::error::Result<()> {
        let (c, _) = encode(&model.checkpoint.params, &token_ids, None)?;
        let all_ids = model.checkpoint.classifier.all_entity_ids();
        let scores = score_entities(&model.checkpoint.classifier, &all_ids, &c)?;
        let classes = predict(&scores, threshold);
        let probs = scores.probabilities();
        for (i, class) in classes.iter().enumerate() {
            let slot = out.add(i);
            if *class == tokel::NIL_ID {
                (*slot).entity = ptr::null();
                (*slot).probability = 0.0;
            } else {
                let j = all_ids.iter().position(|id| id == class).unwrap();
                let name = model
                    .entity_vocab
                    .entity_of(*class)
                    .cloned()
                    .unwrap_or_else(|| "?".to_string());
                (*slot).entity = model.intern(&name);
                (*slot).probability = probs[[i, j]];
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => TOKEL_OK,
        Err(e) => {
            set_error(model, e.to_string());
            TOKEL_ERR_PREDICT
        }
    }
}

/// Returns the last error message for this handle, or NULL. The pointer
/// stays valid until the next call on the same handle.
///
/// # Safety
/// `model` must be a live handle from `tokel_model_load` or null.
#[no_mangle]
pub unsafe extern "C" fn tokel_last_error(model: *const TokelModel) -> *const c_char {
    if model.is_null() {
        return ptr::null();
    }
    match &(*model).last_error {
        Some(msg) => msg.as_ptr(),
        None => ptr::null(),
    }
}

/// Number of entities the model can link against (Nil excluded).
///
/// # Safety
/// `model` must be a live handle from `tokel_model_load`.
#[no_mangle]
pub unsafe extern "C" fn tokel_kb_size(model: *const TokelModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).checkpoint.classifier.kb_size() - 1
}

/// Releases a handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be null or a handle from `tokel_model_load` that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn tokel_model_free(model: *mut TokelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
