/// Hand-labelled `(response, persona, verdict)` audit of the closed world.
pub const AUDIT: [(&str, &str, i8); 20] = [
    ("yes i have a dog", "i have a dog", 1),
    ("yes i have a dog", "i own a cat", -1),
    ("yes i have a dog", "i live in paris", 0),
    ("my pet is a fish", "i own a fish", 1),
    ("my pet is a fish", "my pet is a horse", -1),
    ("i live in rome", "my home is in rome", 1),
    ("i live in rome", "i reside in oslo", -1),
    ("i live in rome", "i work as a chef", 0),
    ("i am from lima", "i live in lima", 1),
    ("i am from lima", "i live in cairo", -1),
    ("i am a nurse", "my job is nurse", 1),
    ("i am a nurse", "i am a pilot", -1),
    ("i am a nurse", "i have a bird", 0),
    ("i work as a baker", "i work as a baker", 1),
    ("i work as a baker", "my job is farmer", -1),
    ("my job is chef", "i own a horse", 0),
    ("hello there", "i have a dog", 0),
    ("i own a bird", "my pet is a bird", 1),
    ("i own a bird", "i reside in paris", 0),
    ("my home is in oslo", "i live in oslo", 1),
];
